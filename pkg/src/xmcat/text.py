"""Count-based word/cluster model: co-occurrence counts, Bayes posteriors with
a uniform cluster prior, thresholded hard assignment, and concreteness.

All probability decisions (argmax, ties, threshold comparisons) are made on
exact rationals built from the integer counts; floats appear only at the
reporting boundary. Thresholds are read decimally: ``0.08`` means exactly
2/25, not the nearest binary double.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

COUNTS_MAGIC = "XMCT"
_ZERO = Fraction(0)


@dataclass(frozen=True)
class TextConfig:
    """Knobs for the word-assignment rule."""

    text_threshold: float = 0.08

    def validate(self) -> None:
        if not 0.0 < self.text_threshold < 1.0:
            raise ValueError(f"text_threshold must be in (0,1), got {self.text_threshold}")


@dataclass(frozen=True)
class WordAssignment:
    word: str
    cluster: int | None
    probability: float


def _threshold_fraction(threshold: float) -> Fraction:
    # decimal reading: str() of a float is its shortest round-tripping form
    return Fraction(str(float(threshold)))


class CooccurrenceTable:
    """Integer co-occurrence counts between caption words and visual clusters.

    ``count_cluster[c]`` is the number of observed captions whose image
    predicted cluster c; ``count_joint[w][c]`` counts captions where word w and
    cluster c co-occurred. Both are deduplicated within one caption: a word
    type and a cluster contribute at most one increment per observation.
    """

    def __init__(self, n_clusters: int):
        if n_clusters < 1:
            raise ValueError(f"n_clusters must be positive, got {n_clusters}")
        self.n_clusters = n_clusters
        self.count_cluster: dict[int, int] = {}
        self.count_joint: dict[str, dict[int, int]] = {}
        self.vocabulary: set[str] = set()
        self._version = 0
        self._assign_cache: dict[tuple[str, float], tuple[int, WordAssignment]] = {}

    def observe(self, tokens, cluster_bits) -> None:
        """Fold one (caption, visual prediction) pair into the counts."""
        bits = np.asarray(cluster_bits)
        if bits.shape != (self.n_clusters,):
            raise ValueError(f"cluster vector shape {bits.shape} != ({self.n_clusters},)")
        if not np.isin(bits, (0, 1)).all():
            raise ValueError("cluster vector entries must be 0 or 1")
        words = set(tokens)
        self.vocabulary |= words
        active = np.flatnonzero(bits)
        if active.size == 0:
            return
        self._version += 1
        for c in active:
            c = int(c)
            self.count_cluster[c] = self.count_cluster.get(c, 0) + 1
        for w in words:
            row = self.count_joint.setdefault(w, {})
            for c in active:
                c = int(c)
                row[c] = row.get(c, 0) + 1

    def p_word_given_cluster(self, word: str, cluster: int) -> float:
        """count(w,c)/count(c); 0.0 when the cluster was never observed."""
        denom = self.count_cluster.get(cluster, 0)
        if denom == 0:
            return 0.0
        return self.count_joint.get(word, {}).get(cluster, 0) / denom

    def posterior_fractions(self, word: str) -> list[Fraction]:
        """Exact P(c|w) per cluster. All-zero when the word never co-occurred.

        A uniform cluster prior cancels out, so P(c|w) is P(w|c) normalized by
        the marginal sum over clusters.
        """
        row = self.count_joint.get(word)
        ratios = [_ZERO] * self.n_clusters
        if not row:
            return ratios
        for c, joint in row.items():
            ratios[c] = Fraction(joint, self.count_cluster[c])
        total = sum(ratios)
        if total == 0:
            return ratios
        return [r / total for r in ratios]

    def p_cluster_given_word(self, word: str) -> np.ndarray:
        return np.array([float(f) for f in self.posterior_fractions(word)])

    def assign_word(self, word: str, threshold: float) -> WordAssignment:
        """Hard assignment: argmax_c P(c|w) if it reaches threshold, else None.

        Exact ties go to the smallest cluster index.
        """
        key = (word, float(threshold))
        cached = self._assign_cache.get(key)
        if cached is not None and cached[0] == self._version:
            return cached[1]
        posterior = self.posterior_fractions(word)
        best_c = 0
        best_p = posterior[0]
        for c in range(1, self.n_clusters):
            if posterior[c] > best_p:
                best_c, best_p = c, posterior[c]
        if best_p >= _threshold_fraction(threshold):
            result = WordAssignment(word, best_c, float(best_p))
        else:
            result = WordAssignment(word, None, float(best_p))
        self._assign_cache[key] = (self._version, result)
        return result

    def encode_sentence(self, tokens, threshold: float) -> np.ndarray:
        """Binary cluster vector: the union of the tokens' assignments."""
        bits = np.zeros(self.n_clusters, dtype=np.uint8)
        for w in set(tokens):
            a = self.assign_word(w, threshold)
            if a.cluster is not None:
                bits[a.cluster] = 1
        return bits

    def concreteness(self, word: str) -> float:
        """max_c P(c|w); 0.0 for words never seen with any cluster."""
        return float(max(self.posterior_fractions(word)))

    def joint_size(self) -> int:
        return sum(len(row) for row in self.count_joint.values())


def save_counts(table: CooccurrenceTable, path) -> None:
    """Serialize counts: header line, C (cluster) and J (joint) records, then
    an E trailer carrying the record total so truncated files never parse."""
    lines = [f"{COUNTS_MAGIC} v1 N={table.n_clusters}"]
    for c in sorted(table.count_cluster):
        lines.append(f"C\t{c}\t{table.count_cluster[c]}")
    for w in sorted(table.count_joint):
        row = table.count_joint[w]
        for c in sorted(row):
            lines.append(f"J\t{w}\t{c}\t{row[c]}")
    lines.append(f"E\t{len(lines) - 1}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_counts(path) -> CooccurrenceTable:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise ValueError(f"{path}: empty counts file")
    if not text.endswith("\n"):
        raise ValueError(f"{path}: no trailing newline, file is truncated")
    header = lines[0].split()
    if len(header) != 3 or header[0] != COUNTS_MAGIC or header[1] != "v1" or not header[2].startswith("N="):
        raise ValueError(f"{path}: line 1: bad header {lines[0]!r}")
    try:
        n = int(header[2][2:])
    except ValueError:
        raise ValueError(f"{path}: line 1: bad cluster count in header {lines[0]!r}") from None
    table = CooccurrenceTable(n)
    records = 0
    declared = None
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        if declared is not None:
            raise ValueError(f"{path}: line {lineno}: record after E trailer")
        fields = line.split("\t")
        if fields[0] == "E":
            if len(fields) != 2:
                raise ValueError(f"{path}: line {lineno}: E record needs 2 fields, got {len(fields)}")
            declared = _parse_int(fields[1], path, lineno)
            continue
        records += 1
        if fields[0] == "C":
            if len(fields) != 3:
                raise ValueError(f"{path}: line {lineno}: C record needs 3 fields, got {len(fields)}")
            c, count = _parse_int(fields[1], path, lineno), _parse_int(fields[2], path, lineno)
            if not 0 <= c < n:
                raise ValueError(f"{path}: line {lineno}: cluster {c} out of range [0,{n})")
            if c in table.count_cluster:
                raise ValueError(f"{path}: line {lineno}: duplicate cluster record {c}")
            table.count_cluster[c] = count
        elif fields[0] == "J":
            if len(fields) != 4:
                raise ValueError(f"{path}: line {lineno}: J record needs 4 fields, got {len(fields)}")
            w = fields[1]
            c, count = _parse_int(fields[2], path, lineno), _parse_int(fields[3], path, lineno)
            if not 0 <= c < n:
                raise ValueError(f"{path}: line {lineno}: cluster {c} out of range [0,{n})")
            row = table.count_joint.setdefault(w, {})
            if c in row:
                raise ValueError(f"{path}: line {lineno}: duplicate joint record ({w!r},{c})")
            row[c] = count
            table.vocabulary.add(w)
        else:
            raise ValueError(f"{path}: line {lineno}: unknown record tag {fields[0]!r}")
    for w, row in table.count_joint.items():
        for c, count in row.items():
            if count > table.count_cluster.get(c, 0):
                raise ValueError(
                    f"{path}: joint count for ({w!r},{c}) is {count}, exceeds cluster count "
                    f"{table.count_cluster.get(c, 0)}"
                )
    if declared is None:
        raise ValueError(f"{path}: missing E trailer, file is truncated")
    if declared != records:
        raise ValueError(f"{path}: E trailer declares {declared} records, found {records}")
    return table


def _parse_int(text: str, path, lineno: int) -> int:
    try:
        value = int(text)
    except ValueError:
        raise ValueError(f"{path}: line {lineno}: not an integer: {text!r}") from None
    if value < 0:
        raise ValueError(f"{path}: line {lineno}: negative count {value}")
    return value
