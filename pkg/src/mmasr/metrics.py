"""Word error rate from a minimum edit-distance alignment."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import ContractError


@dataclass(frozen=True)
class AlignmentStats:
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    ref_length: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def rate(self) -> float:
        if self.ref_length == 0:
            raise ContractError("WER is undefined for an empty reference")
        return self.errors / self.ref_length

    def __add__(self, other: "AlignmentStats") -> "AlignmentStats":
        return AlignmentStats(
            self.substitutions + other.substitutions,
            self.insertions + other.insertions,
            self.deletions + other.deletions,
            self.ref_length + other.ref_length,
        )


def align(ref: Sequence[str], hyp: Sequence[str]) -> AlignmentStats:
    """Unit-cost Levenshtein alignment counts.

    Among alignments of equal total cost the one with the fewest
    insertions+deletions wins, i.e. substitutions are preferred.
    """
    n, m = len(ref), len(hyp)
    # each cell: (cost, indels, S, I, D)
    prev = [(j, j, 0, j, 0) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, i, 0, 0, i)]
        r = ref[i - 1]
        for j in range(1, m + 1):
            c, k, s, ins, d = prev[j - 1]
            if r == hyp[j - 1]:
                best = (c, k, s, ins, d)
            else:
                best = (c + 1, k, s + 1, ins, d)
            c, k, s, ins, d = prev[j]
            cand = (c + 1, k + 1, s, ins, d + 1)
            if cand[:2] < best[:2]:
                best = cand
            c, k, s, ins, d = cur[j - 1]
            cand = (c + 1, k + 1, s, ins + 1, d)
            if cand[:2] < best[:2]:
                best = cand
            cur.append(best)
        prev = cur
    _, _, s, ins, d = prev[m]
    return AlignmentStats(s, ins, d, n)


def wer(ref: Sequence[str], hyp: Sequence[str]) -> tuple[AlignmentStats, float]:
    if len(ref) == 0:
        raise ContractError("wer(): empty reference; use corpus_wer to pool counts")
    stats = align(ref, hyp)
    return stats, stats.rate


def corpus_stats(pairs: Iterable[tuple[Sequence[str], Sequence[str]]]) -> AlignmentStats:
    total = AlignmentStats()
    seen = False
    for ref, hyp in pairs:
        total = total + align(ref, hyp)
        seen = True
    if not seen:
        raise ContractError("corpus_wer(): no pairs given")
    return total


def corpus_wer(pairs) -> float:
    """Pooled error count over pooled reference length."""
    return corpus_stats(pairs).rate


def write_score_file(path, rows) -> None:
    """rows: iterable of (utt_id, AlignmentStats)."""
    with open(path, "w", encoding="utf-8") as fh:
        for utt_id, st in rows:
            rate = st.errors / st.ref_length if st.ref_length else float("nan")
            fh.write(f"{utt_id}\t{st.substitutions}\t{st.insertions}\t{st.deletions}"
                     f"\t{st.ref_length}\t{rate:.6f}\n")


def read_score_file(path) -> list[tuple[str, AlignmentStats]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            utt, s, i, d, n, _ = line.rstrip("\n").split("\t")
            rows.append((utt, AlignmentStats(int(s), int(i), int(d), int(n))))
    return rows
