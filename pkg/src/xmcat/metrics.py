"""Evaluation battery: clustering F-score, mean association strength, Pearson
correlation with frequency buckets, zero-shot multi-label classification,
greedy IoU localization matching, and the in-scope baselines (random
clustering, text-only co-occurrence embeddings + k-means, text-only
concreteness, random boxes).

Metric reports serialize to a flat key=value file plus a CSV row; metrics that
are undefined for a run (e.g. no qualifying association pairs) are simply
absent from the report rather than coerced to a number.
"""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .data import MultimodalSample, load_image
from .text import CooccurrenceTable
from .vision import BoundingBox, Network, compute_cam, extract_box, predict_clusters

Clustering = dict[str, int]


@dataclass
class MetricsReport:
    """A named bundle of finite scalar metrics tied to a run seed and config."""

    task: str
    metrics: dict[str, float] = field(default_factory=dict)
    seed: int = 0
    config_digest: str = ""

    def validate(self) -> None:
        for key, value in self.metrics.items():
            if not math.isfinite(value):
                raise ValueError(f"metric {key!r} is not finite: {value}")

    def to_keyvalue(self) -> str:
        self.validate()
        lines = [f"task={self.task}", f"seed={self.seed}", f"config_digest={self.config_digest}"]
        for key in sorted(self.metrics):
            lines.append(f"{key}={self.metrics[key]:.10g}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        self.validate()
        keys = sorted(self.metrics)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["task", "seed", "config_digest", *keys])
        writer.writerow([self.task, self.seed, self.config_digest, *(f"{self.metrics[k]:.10g}" for k in keys)])
        return buf.getvalue()

    def write(self, base_path) -> list[str]:
        """Write <base>.txt and <base>.csv; returns the paths written."""
        from pathlib import Path

        base = Path(base_path)
        txt = base.with_suffix(".txt")
        csv_path = base.with_suffix(".csv")
        txt.write_text(self.to_keyvalue(), encoding="utf-8")
        csv_path.write_text(self.to_csv(), encoding="utf-8")
        return [str(txt), str(csv_path)]


def _harmonic(p: float, r: float) -> float:
    if p + r == 0:
        return 0.0
    return 2 * p * r / (p + r)


def clustering_fscore(gold: dict[str, str], clustering: Clustering) -> float:
    """Size-weighted mean over gold classes of the best cluster F against each.

    Cluster contents are restricted to gold words before scoring. Every gold
    word must be present in the clustering; callers place unassigned words in
    reserved singleton clusters first (see ``induced_clustering``).
    """
    if not gold:
        raise ValueError("clustering_fscore: empty gold taxonomy")
    missing = [w for w in gold if w not in clustering]
    if missing:
        raise ValueError(f"clustering_fscore: words missing from clustering: {sorted(missing)[:5]}")
    classes: dict[str, set[str]] = {}
    for word, cls in gold.items():
        classes.setdefault(cls, set()).add(word)
    clusters: dict[int, set[str]] = {}
    for word in gold:
        clusters.setdefault(clustering[word], set()).add(word)
    total_words = sum(len(ws) for ws in classes.values())
    score = 0.0
    for ws in classes.values():
        best = 0.0
        for members in clusters.values():
            overlap = len(ws & members)
            if overlap == 0:
                continue
            best = max(best, _harmonic(overlap / len(members), overlap / len(ws)))
        score += (len(ws) / total_words) * best
    return score


def induced_clustering(table: CooccurrenceTable, words, threshold: float) -> Clustering:
    """Model-side clustering over the given words: f(w), or a reserved
    singleton cluster per unassigned word (ids start at n_clusters)."""
    clustering: Clustering = {}
    reserved = table.n_clusters
    for w in words:
        a = table.assign_word(w, threshold)
        if a.cluster is not None:
            clustering[w] = a.cluster
        else:
            clustering[w] = reserved
            reserved += 1
    return clustering


def mean_association_strength(
    clustering: Clustering, association: dict[tuple[str, str], float], words
) -> float | None:
    """Mean gold strength over ordered same-cluster word pairs found in the
    association table. Pairs absent from the table are excluded; if no pair
    qualifies the metric is undefined and None is returned."""
    words = [w for w in words if w in clustering]
    strengths = []
    for w1 in words:
        for w2 in words:
            if w1 == w2 or clustering[w1] != clustering[w2]:
                continue
            value = association.get((w1, w2))
            if value is not None:
                strengths.append(value)
    if not strengths:
        return None
    return float(np.mean(strengths))


def pearson(xs, ys) -> float:
    """Product-moment correlation; rejects short or zero-variance input."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError(f"pearson: need equal-length vectors, got {xs.shape} and {ys.shape}")
    if xs.size < 2:
        raise ValueError(f"pearson: need at least 2 points, got {xs.size}")
    dx = xs - xs.mean()
    dy = ys - ys.mean()
    vx = float(dx @ dx)
    vy = float(dy @ dy)
    if vx == 0.0 or vy == 0.0:
        raise ValueError("pearson: zero variance input")
    return float(dx @ dy) / math.sqrt(vx * vy)


def corpus_frequencies(token_lists) -> dict[str, int]:
    counts: Counter[str] = Counter()
    for tokens in token_lists:
        counts.update(tokens)
    return dict(counts)


def concreteness_eval(
    table: CooccurrenceTable,
    gold: dict[str, float],
    frequencies: dict[str, int],
    min_frequencies=(1, 10, 50, 100),
    seed: int = 0,
    config_digest: str = "",
) -> MetricsReport:
    """Pearson between model concreteness and gold ratings, per frequency bucket.

    Bucket b keeps the gold words with corpus frequency >= b. Degenerate
    buckets (fewer than two words, or zero variance) are reported absent.
    """
    if list(min_frequencies) != sorted(set(min_frequencies)):
        raise ValueError(f"min_frequencies must be strictly ascending, got {min_frequencies}")
    report = MetricsReport("concreteness", seed=seed, config_digest=config_digest)
    for bucket in min_frequencies:
        words = sorted(w for w in gold if frequencies.get(w, 0) >= bucket)
        report.metrics[f"bucket_{bucket}_words"] = len(words)
        if len(words) < 2:
            continue
        scores = [table.concreteness(w) for w in words]
        ratings = [gold[w] for w in words]
        try:
            report.metrics[f"pearson_min{bucket}"] = pearson(scores, ratings)
        except ValueError:
            continue  # zero-variance bucket stays absent
    return report


def cooccurrence_matrix(token_lists, vocabulary: list[str]) -> np.ndarray:
    """Caption-level co-occurrence counts between word types (diagonal zero)."""
    index = {w: i for i, w in enumerate(vocabulary)}
    matrix = np.zeros((len(vocabulary), len(vocabulary)), dtype=np.float64)
    for tokens in token_lists:
        present = sorted({index[t] for t in tokens if t in index})
        for a in range(len(present)):
            for b in range(a + 1, len(present)):
                matrix[present[a], present[b]] += 1
                matrix[present[b], present[a]] += 1
    return matrix


def _normalize_rows(matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return matrix / norms


def textonly_concreteness(
    token_lists,
    gold: dict[str, float],
    min_count: int = 10,
    pole_size: int = 20,
) -> dict[str, float]:
    """Text-only concreteness baseline from caption co-occurrence embeddings.

    Words are embedded as L2-normalized co-occurrence rows; the score is the
    mean cosine to the ``pole_size`` most concrete representative words minus
    the mean cosine to the ``pole_size`` least concrete ones. Representatives
    must occur more than ``min_count`` times in the corpus; fewer than
    ``pole_size`` qualifying words per pole is an error.
    """
    frequencies = corpus_frequencies(token_lists)
    vocabulary = sorted(frequencies)
    qualifying = [w for w in vocabulary if w in gold and frequencies[w] > min_count]
    if len(qualifying) < 2 * pole_size:
        raise ValueError(
            f"textonly_concreteness: only {len(qualifying)} qualifying words, "
            f"need {2 * pole_size} (>{min_count} occurrences and a gold rating)"
        )
    concrete = sorted(qualifying, key=lambda w: (-gold[w], w))[:pole_size]
    taken = set(concrete)
    abstract = [w for w in sorted(qualifying, key=lambda w: (gold[w], w)) if w not in taken][:pole_size]
    embeddings = _normalize_rows(cooccurrence_matrix(token_lists, vocabulary))
    index = {w: i for i, w in enumerate(vocabulary)}
    concrete_rows = embeddings[[index[w] for w in concrete]]
    abstract_rows = embeddings[[index[w] for w in abstract]]
    scores = {}
    for w in vocabulary:
        row = embeddings[index[w]]
        scores[w] = float((concrete_rows @ row).mean() - (abstract_rows @ row).mean())
    return scores


def build_class_map(class_words, table: CooccurrenceTable, threshold: float) -> dict[int, set[str]]:
    """cluster -> set of class words assigned to it (one-to-many is expected)."""
    mapping: dict[int, set[str]] = {}
    for w in class_words:
        a = table.assign_word(w, threshold)
        if a.cluster is not None:
            mapping.setdefault(a.cluster, set()).add(w)
    return mapping


def multilabel_counts(predicted: set[str], gold: set[str]) -> tuple[int, int, int]:
    tp = len(predicted & gold)
    return tp, len(predicted) - tp, len(gold) - tp


def prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """Micro precision/recall/F with the divide-by-zero convention of 0."""
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return precision, recall, _harmonic(precision, recall)


def multilabel_eval(
    samples: list[MultimodalSample],
    net: Network,
    class_map: dict[int, set[str]],
    visual_threshold: float,
    seed: int = 0,
    config_digest: str = "",
    batch_size: int = 64,
) -> MetricsReport:
    """Zero-shot classification: predicted classes are the union of the classes
    mapped to the image's predicted clusters; micro-averaged P/R/F."""
    tp = fp = fn = 0
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo : lo + batch_size]
        images = np.stack([load_image(s.image_path) for s in chunk])
        probs = net.forward(images)
        bits = predict_clusters(probs, visual_threshold)
        for sample, row in zip(chunk, bits):
            predicted: set[str] = set()
            for c in np.flatnonzero(row):
                predicted |= class_map.get(int(c), set())
            dtp, dfp, dfn = multilabel_counts(predicted, set(sample.classes))
            tp += dtp
            fp += dfp
            fn += dfn
    precision, recall, f1 = prf(tp, fp, fn)
    return MetricsReport(
        "classification",
        {
            "precision": precision,
            "recall": recall,
            "f1": f1,
            "tp": float(tp),
            "fp": float(fp),
            "fn": float(fn),
            "images": float(len(samples)),
        },
        seed=seed,
        config_digest=config_digest,
    )


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union on inclusive-exclusive pixel boxes."""
    ix = max(0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    iy = max(0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union


def match_boxes(
    predicted: list[BoundingBox], gold: list[BoundingBox], threshold: float = 0.5
) -> tuple[int, int, int]:
    """Greedy matching by descending IoU, each box used at most once; only
    pairs with IoU strictly above the threshold match. Returns (tp, fp, fn)."""
    pairs = []
    for pi, p in enumerate(predicted):
        for gi, g in enumerate(gold):
            value = iou(p, g)
            if value > threshold:
                pairs.append((-value, pi, gi))
    pairs.sort()
    used_p: set[int] = set()
    used_g: set[int] = set()
    tp = 0
    for _neg, pi, gi in pairs:
        if pi in used_p or gi in used_g:
            continue
        used_p.add(pi)
        used_g.add(gi)
        tp += 1
    return tp, len(predicted) - tp, len(gold) - tp


def predict_boxes(net: Network, image: np.ndarray, visual_threshold: float) -> list[BoundingBox]:
    """One box per predicted cluster whose CAM segments cleanly."""
    probs = net.forward(image[None])[0]
    boxes = []
    for c in np.flatnonzero(predict_clusters(probs, visual_threshold)):
        box = extract_box(compute_cam(net, image, int(c)))
        if box is not None:
            boxes.append(box)
    return boxes


def localization_eval(
    samples: list[MultimodalSample],
    net: Network,
    visual_threshold: float,
    seed: int = 0,
    config_digest: str = "",
) -> MetricsReport:
    tp = fp = fn = 0
    n_pred = 0
    for sample in samples:
        image = load_image(sample.image_path)
        predicted = predict_boxes(net, image, visual_threshold)
        n_pred += len(predicted)
        dtp, dfp, dfn = match_boxes(predicted, [b for _, b in sample.boxes])
        tp += dtp
        fp += dfp
        fn += dfn
    precision, recall, f1 = prf(tp, fp, fn)
    return MetricsReport(
        "localization",
        {
            "precision": precision,
            "recall": recall,
            "f1": f1,
            "tp": float(tp),
            "fp": float(fp),
            "fn": float(fn),
            "predicted_boxes": float(n_pred),
            "images": float(len(samples)),
        },
        seed=seed,
        config_digest=config_digest,
    )


def random_clustering(words, k: int, seed: int) -> Clustering:
    """Assign each word independently and uniformly to one of k clusters."""
    if k < 1:
        raise ValueError(f"random_clustering: k must be >= 1, got {k}")
    words = list(words)
    rng = np.random.Generator(np.random.PCG64(seed))
    labels = rng.integers(0, k, size=len(words))
    return {w: int(c) for w, c in zip(words, labels)}


def random_boxes(k: int, image_size: int, seed) -> list[BoundingBox]:
    """k uniform boxes: corners drawn on [0, size], ordered, zero-area redrawn.

    seed may be an int or an already-constructed numpy Generator (so a caller
    can draw several images' boxes from one stream).
    """
    if image_size < 2:
        raise ValueError(f"random_boxes: image_size must be >= 2, got {image_size}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.Generator(np.random.PCG64(seed))
    boxes = []
    while len(boxes) < k:
        x0, x1, y0, y1 = rng.integers(0, image_size + 1, size=4)
        if x0 == x1 or y0 == y1:
            continue
        boxes.append(BoundingBox(int(min(x0, x1)), int(min(y0, y1)), int(max(x0, x1)), int(max(y0, y1))))
    return boxes


def kmeans(vectors: np.ndarray, k: int, seed: int, max_iter: int = 300) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding on Euclidean distance.

    Stops at an assignment fixpoint or after max_iter sweeps. An emptied
    cluster is reseeded with the point farthest from its assigned centroid.
    Returns integer labels per row; ties go to the smallest cluster index.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2:
        raise ValueError(f"kmeans: need a 2-d matrix, got shape {vectors.shape}")
    n = len(vectors)
    if not 1 <= k <= n:
        raise ValueError(f"kmeans: k must be in [1,{n}], got {k}")
    rng = np.random.Generator(np.random.PCG64(seed))

    centers = np.empty((k, vectors.shape[1]))
    centers[0] = vectors[rng.integers(n)]
    closest = ((vectors - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = closest.sum()
        if total == 0:
            centers[i] = vectors[rng.integers(n)]
        else:
            centers[i] = vectors[rng.choice(n, p=closest / total)]
        closest = np.minimum(closest, ((vectors - centers[i]) ** 2).sum(axis=1))

    labels = np.full(n, -1)
    for _ in range(max_iter):
        dists = ((vectors[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = dists.argmin(axis=1)
        for c in range(k):
            mask = new_labels == c
            if mask.any():
                continue
            per_point = dists[np.arange(n), new_labels]
            far = int(per_point.argmax())
            centers[c] = vectors[far]
            new_labels[far] = c
            dists[:, c] = ((vectors - centers[c]) ** 2).sum(axis=1)
        if (new_labels == labels).all():
            break
        labels = new_labels
        for c in range(k):
            mask = labels == c
            if mask.any():
                centers[c] = vectors[mask].mean(axis=0)
    return labels


def kmeans_text_clustering(token_lists, words, k: int, seed: int) -> Clustering:
    """Cluster words by their normalized caption co-occurrence embeddings."""
    frequencies = corpus_frequencies(token_lists)
    vocabulary = sorted(frequencies)
    embeddings = _normalize_rows(cooccurrence_matrix(token_lists, vocabulary))
    index = {w: i for i, w in enumerate(vocabulary)}
    words = list(words)
    missing = [w for w in words if w not in index]
    if missing:
        raise ValueError(f"kmeans_text_clustering: words absent from corpus: {sorted(missing)[:5]}")
    labels = kmeans(embeddings[[index[w] for w in words]], k, seed)
    return {w: int(c) for w, c in zip(words, labels)}
