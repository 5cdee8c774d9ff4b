"""Deterministic shapes-world generator plus the dataset file formats: PPM
images, the tab-separated sample manifest, and the gold resource tables
(taxonomy, association strengths, concreteness ratings).

Every generated byte is a pure function of (world spec, seed). Each scene
draws from its own generator stream derived from (seed, scene index), so
scenes are independent and the corpus is reproducible regardless of how
generation is scheduled.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .vision import BoundingBox

SHAPES = ("circle", "square", "triangle", "cross")
COLORS = ("red", "green", "blue")
FUNCTION_WORDS = ("a", "the", "is", "on", "near", "very")
GLUE_WORDS = ("and",)
THEME_WORDS = (
    ("meadow", "breeze"),
    ("harbor", "tide"),
    ("ember", "dune"),
    ("grove", "mist"),
    ("canyon", "frost"),
    ("lagoon", "spark"),
)
COLOR_VALUES = {"red": (200, 40, 40), "green": (40, 180, 60), "blue": (45, 70, 200)}
THEME_TINTS = ((6, 0, -6), (-6, 6, 0), (0, -6, 6), (5, 5, -5), (-5, 0, 5), (0, 5, -5))


@dataclass(frozen=True)
class WorldSpec:
    """Layout of the synthetic world.

    Classes are the 12 color x shape pairs, named as single tokens
    ("redcircle"). Themes partition the shape-major class list into contiguous
    blocks; within each theme, adjacent same-shape classes form companion
    pairs that co-occur in scenes. Companion chains (e.g. red/green/blue
    circles linked through the green one) give cross-situational learning a
    path to category-level clusters, and give the association gold real
    variance. Theme words are textual only: background tints stay subtle so
    themes are not trivially visible.
    """

    canvas: int = 64
    n_themes: int = 3
    min_object: int = 10
    max_object: int = 24
    background: int = 96
    noise: int = 14
    max_place_attempts: int = 100
    # scene mix: companion pair / companion pair + extra / single solo
    p_pair: float = 0.2
    p_pair_plus: float = 0.2

    def validate(self) -> None:
        n_classes = len(SHAPES) * len(COLORS)
        if not 1 <= self.n_themes <= len(THEME_WORDS) or n_classes % self.n_themes:
            raise ValueError(
                f"n_themes must divide {n_classes} and be in [1,{len(THEME_WORDS)}], got {self.n_themes}"
            )
        if self.canvas < 16 or self.canvas % 4:
            raise ValueError(f"canvas must be a multiple of 4 and >= 16, got {self.canvas}")
        if not 4 <= self.min_object <= self.max_object <= self.canvas // 2:
            raise ValueError(
                f"object sizes must satisfy 4 <= {self.min_object} <= {self.max_object} <= canvas/2"
            )
        if self.p_pair < 0 or self.p_pair_plus < 0 or self.p_pair + self.p_pair_plus > 1:
            raise ValueError("scene-mix probabilities must be non-negative and sum to <= 1")

    def class_words(self) -> list[str]:
        return [f"{color}{shape}" for shape in SHAPES for color in COLORS]

    def class_shape(self, word: str) -> str:
        for shape in SHAPES:
            if word.endswith(shape):
                return shape
        raise ValueError(f"not a class word: {word!r}")

    def theme_classes(self, theme: int) -> list[tuple[int, int]]:
        """(shape index, color index) pairs owned by a theme, shape-major order."""
        size = len(SHAPES) * len(COLORS) // self.n_themes
        if not 0 <= theme < self.n_themes:
            raise ValueError(f"theme must be in [0,{self.n_themes}), got {theme}")
        block = range(theme * size, (theme + 1) * size)
        return [(g // len(COLORS), g % len(COLORS)) for g in block]

    def theme_of_word(self, word: str) -> int:
        words = self.class_words()
        if word not in words:
            raise ValueError(f"not a class word: {word!r}")
        size = len(words) // self.n_themes
        return words.index(word) // size

    def companion_pairs(self, theme: int) -> list[tuple[int, int]]:
        """Adjacent same-shape position pairs within theme_classes (may be empty)."""
        classes = self.theme_classes(theme)
        return [
            (i, i + 1)
            for i in range(len(classes) - 1)
            if classes[i][0] == classes[i + 1][0]
        ]

    def solo_weights(self) -> np.ndarray:
        """Per-class solo-scene sampling weights that equalize expected
        appearance counts across all 12 classes under the scene mix."""
        n = len(SHAPES) * len(COLORS)
        expected = np.zeros(n)
        themed = [t for t in range(self.n_themes) if self.companion_pairs(t)]
        for t in themed:
            classes = self.theme_classes(t)
            pairs = self.companion_pairs(t)
            base = t * len(classes)
            for a, b in pairs:
                rate = (self.p_pair + self.p_pair_plus) / (len(themed) * len(pairs))
                expected[base + a] += rate
                expected[base + b] += rate
                others = [i for i in range(len(classes)) if i not in (a, b)]
                for o in others:
                    expected[base + o] += self.p_pair_plus / (len(themed) * len(pairs) * len(others))
        p_solo = 1.0 - self.p_pair - self.p_pair_plus
        target = (expected.sum() + p_solo) / n
        weights = np.maximum(0.0, target - expected)
        if weights.sum() == 0:
            return np.full(n, 1.0 / n)
        return weights / weights.sum()


@dataclass(frozen=True)
class MultimodalSample:
    split: str
    image_path: str
    caption: str
    classes: tuple[str, ...]
    boxes: tuple[tuple[str, BoundingBox], ...]


@dataclass
class GoldResources:
    taxonomy: dict[str, str]
    association: dict[tuple[str, str], float]
    concreteness: dict[str, float]


def write_ppm(path, image: np.ndarray) -> None:
    """image: (h, w, 3) uint8."""
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError(f"write_ppm needs (h,w,3) uint8, got {image.shape} {image.dtype}")
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def _ppm_header(data: bytes, path) -> tuple[int, int, int]:
    if data[:2] != b"P6":
        raise ValueError(f"{path}: not a P6 PPM file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PPM header")
        fields.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError:
        raise ValueError(f"{path}: malformed PPM header fields {fields}") from None
    if maxval != 255:
        raise ValueError(f"{path}: unsupported PPM maxval {maxval}, only 255 accepted")
    return w, h, pos


def read_ppm(path) -> np.ndarray:
    """Load a P6 PPM as float32 (3, h, w) scaled to [0,1]."""
    path = Path(path)
    data = path.read_bytes()
    w, h, pos = _ppm_header(data, path)
    expected = w * h * 3
    raw = data[pos : pos + expected]
    if len(raw) != expected or len(data) != pos + expected:
        raise ValueError(f"{path}: PPM payload is {len(data) - pos} bytes, expected {expected}")
    img = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return (img.transpose(2, 0, 1).astype(np.float32)) / 255.0


def ppm_size(path) -> tuple[int, int]:
    with open(path, "rb") as fh:
        head = fh.read(64)
    w, h, _ = _ppm_header(head, path)
    return w, h


load_image = read_ppm


def _shape_mask(shape: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    center = (size - 1) / 2.0
    if shape == "circle":
        return (xx - center) ** 2 + (yy - center) ** 2 <= (size / 2.0) ** 2
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "triangle":
        half = (yy / max(size - 1, 1)) * (size / 2.0)
        return np.abs(xx - center) <= half
    if shape == "cross":
        bar = max(2, size // 3)
        lo = (size - bar) // 2
        hi = lo + bar
        return ((xx >= lo) & (xx < hi)) | ((yy >= lo) & (yy < hi))
    raise ValueError(f"unknown shape {shape!r}")


def _boxes_overlap(a: tuple[int, int, int, int], b: tuple[int, int, int, int]) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def _render_scene(spec: WorldSpec, seed: int, index: int):
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, index))))
    themed = [t for t in range(spec.n_themes) if spec.companion_pairs(t)]

    roll = rng.random()
    if themed and roll < spec.p_pair + spec.p_pair_plus:
        theme = themed[int(rng.integers(len(themed)))]
        classes = spec.theme_classes(theme)
        pairs = spec.companion_pairs(theme)
        pair_a, pair_b = pairs[int(rng.integers(len(pairs)))]
        picks = [pair_a, pair_b]
        if roll >= spec.p_pair:
            others = [i for i in range(len(classes)) if i not in (pair_a, pair_b)]
            if others:
                picks.append(int(rng.choice(others)))
    else:
        g = int(rng.choice(len(spec.class_words()), p=spec.solo_weights()))
        size = len(spec.class_words()) // spec.n_themes
        theme = g // size
        classes = spec.theme_classes(theme)
        picks = [g - theme * size]

    placed = []  # (class word, outer box, shape, color)
    taken: list[tuple[int, int, int, int]] = []
    for pos in picks:
        s, c = classes[pos]
        size = int(rng.integers(spec.min_object, spec.max_object + 1))
        spot = None
        for _ in range(spec.max_place_attempts):
            x0 = int(rng.integers(0, spec.canvas - size + 1))
            y0 = int(rng.integers(0, spec.canvas - size + 1))
            cand = (x0, y0, x0 + size, y0 + size)
            if not any(_boxes_overlap(cand, t) for t in taken):
                spot = cand
                break
        if spot is None:
            continue  # crowded canvas: this scene simply gets fewer objects
        taken.append(spot)
        placed.append((f"{COLORS[c]}{SHAPES[s]}", spot, SHAPES[s], COLORS[c]))

    base = np.array(spec.background, dtype=np.int16) + np.array(THEME_TINTS[theme], dtype=np.int16)
    noise = rng.integers(-spec.noise, spec.noise + 1, size=(spec.canvas, spec.canvas, 3))
    image = np.clip(base[None, None, :] + noise, 0, 255).astype(np.uint8)

    boxes = []
    for word, (x0, y0, x1, y1), shape, color in placed:
        mask = _shape_mask(shape, x1 - x0)
        image[y0:y1, x0:x1][mask] = COLOR_VALUES[color]
        ys, xs = np.nonzero(mask)
        boxes.append(
            (word, BoundingBox(x0 + int(xs.min()), y0 + int(ys.min()), x0 + int(xs.max()) + 1, y0 + int(ys.max()) + 1))
        )

    words = []
    for i, (word, *_rest) in enumerate(placed):
        if i:
            words.append("and")
        words += ["a", word]
    theme_pool = list(THEME_WORDS[theme])
    n_theme = int(rng.integers(1, 3))
    words += [theme_pool[i] for i in sorted(rng.choice(len(theme_pool), size=n_theme, replace=False))]
    n_fn = int(rng.integers(2, 5))
    words += [FUNCTION_WORDS[i] for i in sorted(rng.choice(len(FUNCTION_WORDS), size=n_fn, replace=False))]
    caption = " ".join(words)

    class_words = tuple(dict.fromkeys(word for word, *_ in placed))
    return image, caption, class_words, tuple(boxes), theme


def _format_boxes(boxes) -> str:
    return ";".join(f"{w}:{b.x_min}:{b.y_min}:{b.x_max}:{b.y_max}" for w, b in boxes)


def generate_dataset(spec: WorldSpec, n_train: int, n_test: int, seed: int, out_dir) -> dict[str, Path]:
    """Render the corpus and write images, manifest, and gold resource files.

    Returns the paths of everything written, keyed by role.
    """
    spec.validate()
    if n_train < 0:
        raise ValueError(f"n_train must be >= 0, got {n_train}")
    if n_test < 0:
        raise ValueError(f"n_test must be >= 0, got {n_test}")
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)

    manifest_lines = []
    assoc: dict[tuple[str, str], int] = {}
    for i in range(n_train + n_test):
        split = "train" if i < n_train else "test"
        image, caption, class_words, boxes, _theme = _render_scene(spec, seed, i)
        rel = f"images/img_{i:05d}.ppm"
        write_ppm(out_dir / rel, image)
        manifest_lines.append(
            f"{split}\t{rel}\t{caption}\t{','.join(class_words)}\t{_format_boxes(boxes)}"
        )
        if split == "train":
            for w1 in class_words:
                for w2 in class_words:
                    if w1 != w2:
                        assoc[(w1, w2)] = assoc.get((w1, w2), 0) + 1

    manifest = out_dir / "manifest.tsv"
    manifest.write_text("\n".join(manifest_lines) + "\n", encoding="utf-8")

    taxonomy = out_dir / "taxonomy.tsv"
    taxonomy.write_text(
        "\n".join(f"{w}\t{spec.class_shape(w)}" for w in spec.class_words()) + "\n",
        encoding="utf-8",
    )

    assoc_path = out_dir / "assoc.tsv"
    assoc_path.write_text(
        "\n".join(f"{w1}\t{w2}\t{n}" for (w1, w2), n in sorted(assoc.items())) + "\n",
        encoding="utf-8",
    )

    ratings: dict[str, float] = {w: 1.0 for w in spec.class_words()}
    for t in range(spec.n_themes):
        for w in THEME_WORDS[t]:
            ratings[w] = 0.3
    for w in FUNCTION_WORDS + GLUE_WORDS:
        ratings[w] = 0.0
    concreteness = out_dir / "concreteness.tsv"
    concreteness.write_text(
        "\n".join(f"{w}\t{r}" for w, r in sorted(ratings.items())) + "\n", encoding="utf-8"
    )

    return {
        "manifest": manifest,
        "taxonomy": taxonomy,
        "association": assoc_path,
        "concreteness": concreteness,
        "images": images_dir,
    }


def load_manifest(path, check_images: bool = True) -> list[MultimodalSample]:
    """Parse and validate a manifest; image paths are resolved to absolutes."""
    path = Path(path)
    base = path.parent
    samples = []
    for i, line in enumerate(path.read_text(encoding="utf-8").splitlines()):
        if not line:
            continue
        fields = line.split("\t")
        if len(fields) != 5:
            raise ValueError(f"{path}: sample {i}: expected 5 tab-separated fields, got {len(fields)}")
        split, rel_image, caption, classes_field, boxes_field = fields
        if split not in ("train", "test"):
            raise ValueError(f"{path}: sample {i}: unknown split {split!r}")
        image_path = base / rel_image
        classes = tuple(c for c in classes_field.split(",") if c)
        boxes = []
        if boxes_field:
            for chunk in boxes_field.split(";"):
                parts = chunk.split(":")
                if len(parts) != 5:
                    raise ValueError(f"{path}: sample {i}: malformed box {chunk!r}")
                try:
                    coords = [int(v) for v in parts[1:]]
                except ValueError:
                    raise ValueError(f"{path}: sample {i}: non-integer box coords {chunk!r}") from None
                try:
                    boxes.append((parts[0], BoundingBox(*coords)))
                except ValueError as exc:
                    raise ValueError(f"{path}: sample {i}: {exc}") from None
        if check_images:
            if not image_path.is_file():
                raise ValueError(f"{path}: sample {i}: missing image file {image_path}")
            w, h = ppm_size(image_path)
            for word, box in boxes:
                if box.x_max > w or box.y_max > h:
                    raise ValueError(
                        f"{path}: sample {i}: box for {word!r} exceeds image bounds {w}x{h}"
                    )
        boxed_words = {w for w, _ in boxes}
        for cls in classes:
            if cls not in boxed_words:
                raise ValueError(f"{path}: sample {i}: gold class {cls!r} has no box")
        samples.append(MultimodalSample(split, str(image_path), caption, classes, tuple(boxes)))
    return samples


def load_taxonomy(path) -> dict[str, str]:
    out: dict[str, str] = {}
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        if not line:
            continue
        fields = line.split("\t")
        if len(fields) != 2:
            raise ValueError(f"{path}: line {i + 1}: expected 'word<TAB>category'")
        out[fields[0]] = fields[1]
    if not out:
        raise ValueError(f"{path}: empty taxonomy")
    return out


def load_association(path) -> dict[tuple[str, str], float]:
    out: dict[tuple[str, str], float] = {}
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        if not line:
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise ValueError(f"{path}: line {i + 1}: expected 'word<TAB>word<TAB>strength'")
        try:
            out[(fields[0], fields[1])] = float(fields[2])
        except ValueError:
            raise ValueError(f"{path}: line {i + 1}: bad strength {fields[2]!r}") from None
    return out


def load_concreteness(path) -> dict[str, float]:
    out: dict[str, float] = {}
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        if not line:
            continue
        fields = line.split("\t")
        if len(fields) != 2:
            raise ValueError(f"{path}: line {i + 1}: expected 'word<TAB>rating'")
        try:
            out[fields[0]] = float(fields[1])
        except ValueError:
            raise ValueError(f"{path}: line {i + 1}: bad rating {fields[1]!r}") from None
    return out


def load_gold(data_dir) -> GoldResources:
    data_dir = Path(data_dir)
    return GoldResources(
        taxonomy=load_taxonomy(data_dir / "taxonomy.tsv"),
        association=load_association(data_dir / "assoc.tsv"),
        concreteness=load_concreteness(data_dir / "concreteness.tsv"),
    )
