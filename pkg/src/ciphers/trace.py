from typing import Iterator, List, NamedTuple

from rawjam_config import LINE_SIZE, TABLE_SIZE, WORD_SIZE


class TraceEntry(NamedTuple):
    offset: int
    round: int
    position: int
    prefetch: bool = False

    @property
    def line(self) -> int:
        return self.offset // LINE_SIZE

    @property
    def column(self) -> int:
        return self.offset % LINE_SIZE

    @property
    def word(self) -> int:
        # word index within the whole table, 0..63
        return self.offset // WORD_SIZE


class AccessTrace:
    """
    Ordered S-box byte offsets touched by one encryption.
    Entries flagged `prefetch` warm the cache and do not depend on data.
    """

    def __init__(self, entries: List[TraceEntry] = None):
        self.entries: List[TraceEntry] = []
        for e in entries or []:
            self.append(e)

    def append(self, entry: TraceEntry):
        if not 0 <= entry.offset < TABLE_SIZE:
            raise Exception(f"trace offset `{entry.offset}` outside the table")
        self.entries.append(entry)

    def record(self, offset: int, round: int, position: int, prefetch: bool = False):
        self.append(TraceEntry(offset, round, position, prefetch))

    @property
    def offsets(self) -> List[int]:
        return [e.offset for e in self.entries]

    def lines(self) -> List[int]:
        return [e.line for e in self.entries]

    def columns(self) -> List[int]:
        return [e.column for e in self.entries]

    def lookups(self, round: int) -> List[TraceEntry]:
        return [e for e in self.entries if e.round == round and not e.prefetch]

    def __len__(self):
        return len(self.entries)

    def __iter__(self) -> Iterator[TraceEntry]:
        return iter(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    def __repr__(self):
        return f"AccessTrace({len(self.entries)} entries)"
