"""Procedural radiograph-like images and the normal / unlabeled / test splits.

A normal image is a mid-gray torso on a dark background holding two lung
fields: dark elliptical interiors ringed by a bright rim, all under a faint
smooth noise texture. An abnormal image adds one to three bright Gaussian
"opacities" inside a lung interior.
"""

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .exceptions import InvalidAR, ManifestParseError
from .pgm import read_pgm, write_pgm
from .rng import stream
from .utils import round_half_up

SPLIT_DIRS = {"normal": "normal", "unlabeled": "unlabeled", "test": "test"}
MANIFEST = "manifest.tsv"
SIDECAR = "hidden_labels.tsv"


@dataclass(frozen=True)
class Lung:
    cy: float
    cx: float
    ay: float  # interior semi-axes, pixels
    ax: float
    rim: float  # rim thickness, pixels


@dataclass(frozen=True)
class Anatomy:
    size: int
    background: float
    body: float
    body_axes: tuple
    interior: float
    rim_level: float
    lungs: tuple
    noise_amplitude: float


def sample_anatomy(rng, size=32):
    """Draw one anatomy.

    Geometry varies by a fraction of a pixel and gray levels by a few
    hundredths, keeping per-image nuisance small next to a lesion.
    """
    s = float(size)
    c = (s - 1) / 2
    spread = rng.uniform(0.17275, 0.17725) * s
    cy = c + rng.uniform(-0.0045, 0.0045) * s
    lungs = []
    for side in (-1.0, 1.0):
        lungs.append(
            Lung(
                cy=cy + rng.uniform(-0.003, 0.003) * s,
                cx=c + side * spread + rng.uniform(-0.003, 0.003) * s,
                ay=rng.uniform(0.2855, 0.2945) * s,
                ax=rng.uniform(0.0785, 0.0815) * s,
                rim=rng.uniform(0.0485, 0.0515) * s,
            )
        )
    return Anatomy(
        size=size,
        background=rng.uniform(0.032, 0.068),
        body=rng.uniform(0.54, 0.60),
        body_axes=(rng.uniform(0.5855, 0.5945) * s, rng.uniform(0.5255, 0.5345) * s),
        interior=rng.uniform(0.18, 0.24),
        rim_level=rng.uniform(0.80, 0.86),
        lungs=tuple(lungs),
        noise_amplitude=rng.uniform(0.0114, 0.0126),
    )


def _grid(size):
    return np.mgrid[0:size, 0:size].astype(np.float64)


def _ellipse(yy, xx, cy, cx, ay, ax):
    return ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0


def lung_masks(anatomy):
    """Ground-truth lung-interior mask (union of both lungs)."""
    yy, xx = _grid(anatomy.size)
    out = np.zeros((anatomy.size, anatomy.size), dtype=bool)
    for lung in anatomy.lungs:
        out |= _ellipse(yy, xx, lung.cy, lung.cx, lung.ay, lung.ax)
    return out


def rim_masks(anatomy):
    yy, xx = _grid(anatomy.size)
    out = np.zeros((anatomy.size, anatomy.size), dtype=bool)
    for lung in anatomy.lungs:
        outer = _ellipse(yy, xx, lung.cy, lung.cx, lung.ay + lung.rim, lung.ax + lung.rim)
        out |= outer & ~_ellipse(yy, xx, lung.cy, lung.cx, lung.ay, lung.ax)
    return out


def render_normal(anatomy, rng):
    size = anatomy.size
    yy, xx = _grid(size)
    c = (size - 1) / 2
    img = np.full((size, size), anatomy.background)
    img[_ellipse(yy, xx, c, c, *anatomy.body_axes)] = anatomy.body
    img[rim_masks(anatomy)] = anatomy.rim_level
    img[lung_masks(anatomy)] = anatomy.interior
    noise = gaussian_filter(rng.standard_normal((size, size)), sigma=1.0)
    noise /= noise.std() + 1e-12
    img = gaussian_filter(img, sigma=0.5) + anatomy.noise_amplitude * noise
    return np.clip(img, 0.0, 1.0)


def gen_normal(rng, size=32):
    """A normal image; identical for identical generator states."""
    return render_normal(sample_anatomy(rng, size), rng)


@dataclass(frozen=True)
class Blob:
    cy: float
    cx: float
    sigma: float
    amplitude: float


def sample_blobs(rng, anatomy, amplitude=None):
    interior = np.argwhere(lung_masks(anatomy))
    count = int(rng.integers(1, 4))
    blobs = []
    for _ in range(count):
        cy, cx = interior[rng.integers(len(interior))]
        amp = rng.uniform(0.2, 0.5)
        blobs.append(
            Blob(
                cy=float(cy),
                cx=float(cx),
                sigma=float(rng.uniform(0.06, 0.10) * anatomy.size),
                amplitude=float(amp if amplitude is None else amplitude),
            )
        )
    return blobs


def add_blobs(image, blobs):
    yy, xx = _grid(image.shape[0])
    out = image.copy()
    for b in blobs:
        out += b.amplitude * np.exp(-((yy - b.cy) ** 2 + (xx - b.cx) ** 2) / (2 * b.sigma ** 2))
    return np.clip(out, 0.0, 1.0)


def gen_abnormal(rng, size=32, amplitude=None, return_blobs=False):
    """The normal image for this generator state plus 1-3 opacities.

    ``amplitude`` overrides the per-blob amplitude draw (0 reproduces the
    paired normal image exactly).
    """
    anatomy = sample_anatomy(rng, size)
    image = render_normal(anatomy, rng)
    blobs = sample_blobs(rng, anatomy, amplitude)
    out = add_blobs(image, blobs)
    return (out, blobs, anatomy) if return_blobs else out


def generate_image(seed, index, abnormal, size=32):
    rng = stream(seed, "image", index)
    return gen_abnormal(rng, size) if abnormal else gen_normal(rng, size)


@dataclass
class DatasetSplit:
    """Normal training set, unlabeled training set (labels hidden) and test set."""

    normal_train: np.ndarray
    unlabeled_train: np.ndarray
    test: np.ndarray
    test_labels: np.ndarray
    unlabeled_labels: np.ndarray = None  # hidden; evaluation-only
    anomaly_ratio: float = None
    seed: int = None
    names: dict = field(default_factory=dict)

    @property
    def train(self):
        """T_train = T_n followed by T_u."""
        return np.concatenate([self.normal_train, self.unlabeled_train])

    def default_names(self):
        return {
            split: [f"{SPLIT_DIRS[split]}/{i:05d}.pgm" for i in range(n)]
            for split, n in (
                ("normal", len(self.normal_train)),
                ("unlabeled", len(self.unlabeled_train)),
                ("test", len(self.test)),
            )
        }

    def __post_init__(self):
        if not self.names:
            self.names = self.default_names()


def build_split(n, m, s, anomaly_ratio, seed, size=32, test_anomaly_fraction=0.5):
    """Generate ``n`` normal, ``m`` unlabeled and ``s`` test images.

    ``round(anomaly_ratio * m)`` unlabeled images are abnormal, shuffled among
    the rest. Every image has its own sub-seed by global index, so the splits
    never share an image.
    """
    if not 0.0 <= anomaly_ratio <= 1.0:
        raise InvalidAR(f"anomaly ratio must lie in [0, 1], got {anomaly_ratio}")
    if min(n, m, s) < 0:
        raise ValueError("split sizes must be non-negative")
    n_abn_u = round_half_up(anomaly_ratio * m)
    u_labels = np.zeros(m, dtype=np.int64)
    u_labels[:n_abn_u] = 1
    u_labels = stream(seed, "unlabeled-order").permutation(u_labels)
    n_abn_t = round_half_up(test_anomaly_fraction * s)
    t_labels = np.zeros(s, dtype=np.int64)
    t_labels[:n_abn_t] = 1
    t_labels = stream(seed, "test-order").permutation(t_labels)

    def make(offset, labels):
        if len(labels) == 0:
            return np.zeros((0, size, size))
        return np.stack([generate_image(seed, offset + i, lab == 1, size) for i, lab in enumerate(labels)])

    return DatasetSplit(
        normal_train=make(0, np.zeros(n, dtype=np.int64)),
        unlabeled_train=make(n, u_labels),
        test=make(n + m, t_labels),
        test_labels=t_labels,
        unlabeled_labels=u_labels,
        anomaly_ratio=float(anomaly_ratio),
        seed=seed,
    )


# persistence

def save_split(split, directory):
    """Write PGMs, the public manifest and the hidden-label sidecar."""
    for sub in SPLIT_DIRS.values():
        os.makedirs(os.path.join(directory, sub), exist_ok=True)
    rows = []
    for split_tag, images, labels in (
        ("normal", split.normal_train, np.zeros(len(split.normal_train), dtype=int)),
        ("unlabeled", split.unlabeled_train, None),
        ("test", split.test, split.test_labels),
    ):
        for i, (name, image) in enumerate(zip(split.names[split_tag], images)):
            write_pgm(os.path.join(directory, name), image)
            rows.append((name, split_tag, "?" if labels is None else str(int(labels[i]))))
    with open(os.path.join(directory, MANIFEST), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# amae manifest v1\n")
        if split.anomaly_ratio is not None:
            fh.write(f"# anomaly_ratio={split.anomaly_ratio!r}\n")
        if split.seed is not None:
            fh.write(f"# seed={split.seed}\n")
        for row in rows:
            fh.write("\t".join(row) + "\n")
    if split.unlabeled_labels is not None:
        with open(os.path.join(directory, SIDECAR), "w", encoding="utf-8", newline="\n") as fh:
            for name, label in zip(split.names["unlabeled"], split.unlabeled_labels):
                fh.write(f"{name}\t{int(label)}\n")


def read_manifest(path):
    """Parse a manifest into ``(rows, meta)``; rows are ``(path, split, label)``.

    ``label`` is an int, or ``None`` for hidden unlabeled entries.
    """
    rows, meta = [], {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                key, sep, value = line[1:].strip().partition("=")
                if sep:
                    meta[key.strip()] = value.strip()
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ManifestParseError(f"expected 3 tab-separated fields, got {len(parts)}", lineno)
            rel, tag, label = parts
            if tag not in SPLIT_DIRS:
                raise ManifestParseError(f"unknown split tag {tag!r}", lineno)
            if tag == "unlabeled":
                if label != "?":
                    raise ManifestParseError("unlabeled entries must carry label '?'", lineno)
                value = None
            elif label in ("0", "1"):
                value = int(label)
                if tag == "normal" and value != 0:
                    raise ManifestParseError("normal-train entries must be label 0", lineno)
            else:
                raise ManifestParseError(f"invalid label {label!r}", lineno)
            rows.append((rel, tag, value))
    return rows, meta


def read_sidecar(path):
    labels = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or parts[1] not in ("0", "1"):
                raise ManifestParseError(f"malformed sidecar entry {line!r}", lineno)
            labels[parts[0]] = int(parts[1])
    return labels


def load_split(directory):
    """Load a split written by :func:`save_split` (pixels are 8-bit quantized)."""
    rows, meta = read_manifest(os.path.join(directory, MANIFEST))
    sidecar_path = os.path.join(directory, SIDECAR)
    hidden = read_sidecar(sidecar_path) if os.path.exists(sidecar_path) else None
    images = {tag: [] for tag in SPLIT_DIRS}
    names = {tag: [] for tag in SPLIT_DIRS}
    test_labels = []
    for rel, tag, label in rows:
        full = os.path.join(directory, rel)
        if not os.path.exists(full):
            raise FileNotFoundError(f"manifest references missing image file: {full}")
        images[tag].append(read_pgm(full))
        names[tag].append(rel)
        if tag == "test":
            test_labels.append(label)
    size = images["normal"][0].shape[0] if images["normal"] else 32

    def stack(tag):
        return np.stack(images[tag]) if images[tag] else np.zeros((0, size, size))

    u_labels = None
    if hidden is not None:
        u_labels = np.array([hidden[n] for n in names["unlabeled"]], dtype=np.int64)
    ar = float(meta["anomaly_ratio"]) if "anomaly_ratio" in meta else None
    seed = int(meta["seed"]) if "seed" in meta else None
    return DatasetSplit(
        normal_train=stack("normal"),
        unlabeled_train=stack("unlabeled"),
        test=stack("test"),
        test_labels=np.array(test_labels, dtype=np.int64),
        unlabeled_labels=u_labels,
        anomaly_ratio=ar,
        seed=seed,
        names=names,
    )
