"""MNIST ingestion and environment-shifted dataset synthesis.

Three families of environments are produced:

* colored MNIST: binary digit<5 / digit>=5 labels with label noise and a color
  channel whose correlation with the label flips between environments;
* rotated MNIST: 10-class digits, one rotation angle per environment;
* two-bit: a 2-feature toy with one invariant and one spurious bit, used for
  quick end-to-end checks.
"""
import gzip
import json
import os
import struct
import urllib.request
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

IDX_LABEL_MAGIC = 0x00000801
IDX_IMAGE_MAGIC = 0x00000803
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
DEFAULT_MNIST_URL = "https://ossci-datasets.s3.amazonaws.com/mnist/"
CACHE_FORMAT = "irmcal-envs"
CACHE_VERSION = 1


class IDXParseError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def parse_idx(data):
    """Decode an IDX label (0x801) or image (0x803) file into a uint8 array."""
    data = bytes(data)
    if len(data) < 4:
        raise IDXParseError("truncated header", len(data))
    (magic,) = struct.unpack(">I", data[:4])
    if magic == IDX_LABEL_MAGIC:
        ndim = 1
    elif magic == IDX_IMAGE_MAGIC:
        ndim = 3
    else:
        raise IDXParseError(f"unsupported magic 0x{magic:08x}", 0)
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IDXParseError("truncated dimension header", len(data))
    dims = struct.unpack(f">{ndim}I", data[4:header])
    expected = 1
    for d in dims:
        expected *= d
    if expected >= 2 ** 32:
        raise IDXParseError(f"dimension overflow: {dims} declare {expected} bytes", 4)
    payload = len(data) - header
    if payload < expected:
        raise IDXParseError(f"truncated payload: {payload} bytes, dimensions {dims} declare {expected}", len(data))
    if payload > expected:
        raise IDXParseError(f"{payload - expected} trailing bytes after payload", header + expected)
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims).copy()


def read_idx(path):
    """Read a raw or gzip-compressed IDX file (detected from its first bytes)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return parse_idx(data)


@dataclass
class RawMNIST:
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.images.ndim != 3 or self.images.shape[1:] != (28, 28):
            raise ValueError(f"images must be n x 28 x 28, got {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("image and label counts differ")
        if self.labels.size and self.labels.max() > 9:
            raise ValueError("digit labels must be 0-9")

    def __len__(self):
        return self.labels.shape[0]

    def head(self, n):
        n = len(self) if n is None else int(n)
        return RawMNIST(self.images[:n], self.labels[:n])


def default_mnist_dir():
    """``$IRMCAL_MNIST_DIR``, else ``./data/mnist``, else ``data/mnist`` of a source checkout."""
    if os.environ.get("IRMCAL_MNIST_DIR"):
        return os.environ["IRMCAL_MNIST_DIR"]
    local = os.path.join(os.getcwd(), "data", "mnist")
    checkout = os.path.join(os.path.dirname(__file__), os.pardir, os.pardir, "data", "mnist")
    if not os.path.isdir(local) and os.path.isdir(checkout):
        return os.path.normpath(checkout)
    return local


def _find(directory, stem):
    for name in (stem, stem + ".gz"):
        path = os.path.join(directory, name)
        if os.path.exists(path):
            return path
    raise FileNotFoundError(f"{stem}[.gz] not found in {directory}; run `irmcal fetch-data` or set IRMCAL_MNIST_DIR")


def load_mnist(directory=None, split="train"):
    directory = directory or default_mnist_dir()
    img_stem, lbl_stem = MNIST_FILES[split]
    return RawMNIST(read_idx(_find(directory, img_stem)), read_idx(_find(directory, lbl_stem)))


def fetch_mnist(dest, base_url=DEFAULT_MNIST_URL, overwrite=False):
    """Download the four gzipped IDX archives into ``dest``. Returns their paths."""
    os.makedirs(dest, exist_ok=True)
    paths = []
    for stems in MNIST_FILES.values():
        for stem in stems:
            target = os.path.join(dest, stem + ".gz")
            if overwrite or not os.path.exists(target):
                url = base_url.rstrip("/") + "/" + stem + ".gz"
                tmp = target + ".part"
                urllib.request.urlretrieve(url, tmp)
                read_idx(tmp)
                os.replace(tmp, target)
            paths.append(target)
    return paths


@dataclass
class EnvDataset:
    env_id: str
    X: np.ndarray
    y: np.ndarray
    split: str = "train"
    n_classes: int = 2

    def __len__(self):
        return self.y.shape[0]

    def subset(self, idx, split=None):
        return EnvDataset(self.env_id, self.X[idx], self.y[idx], split or self.split, self.n_classes)


@dataclass
class CmnistSpec:
    train_envs: tuple = (0.10, 0.20)
    test_envs: tuple = (0.90,)
    label_noise: float = 0.25
    downsample: bool = True
    seed: int = 0

    def __post_init__(self):
        self.train_envs = tuple(float(e) for e in self.train_envs)
        self.test_envs = tuple(float(e) for e in self.test_envs)
        for p in self.train_envs + self.test_envs + (self.label_noise,):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability {p} outside [0, 1]")


@dataclass
class RmnistSpec:
    train_angles: tuple = (15.0, 30.0, 45.0, 60.0, 75.0)
    test_angles: tuple = (0.0,)
    seed: int = 0

    def __post_init__(self):
        self.train_angles = tuple(float(a) for a in self.train_angles)
        self.test_angles = tuple(float(a) for a in self.test_angles)
        for a in self.train_angles + self.test_angles:
            if not 0.0 <= a < 360.0:
                raise ValueError(f"angle {a} outside [0, 360)")


def _pool2(images):
    n, h, w = images.shape
    return images.reshape(n, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


def color_digits(images, green):
    """Two-channel (red, green) rendering; ``images`` in [0, 1], ``green`` boolean per image."""
    out = np.zeros((images.shape[0], 2) + images.shape[1:])
    out[~green, 0] = images[~green]
    out[green, 1] = images[green]
    return out


def make_cmnist(raw, spec):
    """Colored MNIST environments, training environments first.

    Images are shuffled by ``spec.seed`` and dealt round-robin so environments
    are disjoint. Within an environment with parameter ``e``:
    ``P(green | class 0) = e`` and ``P(green | class 1) = 1 - e``.
    """
    if len(raw) == 0:
        raise ValueError("make_cmnist needs at least one image")
    rng = np.random.default_rng(spec.seed)
    order = rng.permutation(len(raw))
    params = [("train", e) for e in spec.train_envs] + [("test", e) for e in spec.test_envs]
    envs = []
    for i, (split, e) in enumerate(params):
        idx = order[i::len(params)]
        images = raw.images[idx].astype(np.float64) / 255.0
        if spec.downsample:
            images = _pool2(images)
        y = (raw.labels[idx] >= 5).astype(np.int64)
        flip = rng.random(y.shape[0]) < spec.label_noise
        y = np.where(flip, 1 - y, y)
        u = rng.random(y.shape[0])
        green = np.where(y == 0, u < e, u < 1.0 - e)
        X = color_digits(images, green).reshape(y.shape[0], -1)
        envs.append(EnvDataset(f"cmnist_e{e:.2f}", X, y, split, 2))
    return envs


def rotate_images(images, angle):
    """Bilinear rotation about the image centre, zero fill outside the source."""
    out = ndimage.rotate(images, angle, axes=(2, 1), reshape=False, order=1, mode="constant", cval=0.0,
                         prefilter=False)
    return np.clip(out, 0.0, 1.0)


def make_rmnist(raw, spec):
    """Rotated MNIST: every environment holds all of ``raw`` at its own angle."""
    base = raw.images.astype(np.float64) / 255.0
    y = raw.labels.astype(np.int64)
    envs = []
    for split, angles in (("train", spec.train_angles), ("test", spec.test_angles)):
        for a in angles:
            X = rotate_images(base, a).reshape(len(raw), -1)
            envs.append(EnvDataset(f"rmnist_{a:g}deg", X, y.copy(), split, 10))
    return envs


def make_twobit(n_per_env, corrs, label_noise=0.25, seed=0, test_corrs=()):
    """Two binary features: bit 0 copies the latent label, bit 1 agrees with the
    observed label with environment-specific probability ``corr``."""
    rng = np.random.default_rng(seed)
    envs = []
    params = [("train", c) for c in corrs] + [("test", c) for c in test_corrs]
    for split, c in params:
        if not 0.0 <= c <= 1.0:
            raise ValueError(f"corr {c} outside [0, 1]")
        latent = rng.integers(0, 2, n_per_env)
        y = np.where(rng.random(n_per_env) < label_noise, 1 - latent, latent)
        spurious = np.where(rng.random(n_per_env) < c, y, 1 - y)
        X = np.stack([latent, spurious], axis=1).astype(np.float64)
        envs.append(EnvDataset(f"twobit_c{c:.2f}", X, y.astype(np.int64), split, 2))
    return envs


def split_train_val(env, fraction=0.8, seed=0):
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    n = len(env)
    if n < 2:
        raise ValueError(f"environment {env.env_id} has fewer than 2 examples")
    n_train = min(max(int(round(fraction * n)), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    return env.subset(perm[:n_train], "train"), env.subset(perm[n_train:], "val")


def save_envs(path, envs, spec=None, **provenance):
    meta = {"format": CACHE_FORMAT, "version": CACHE_VERSION,
            "spec": asdict(spec) if spec is not None else None, "provenance": provenance,
            "envs": [{"env_id": e.env_id, "split": e.split, "n_classes": e.n_classes} for e in envs]}
    arrays = {"meta": np.array(json.dumps(meta, sort_keys=True))}
    for i, e in enumerate(envs):
        arrays[f"X{i}"] = e.X
        arrays[f"y{i}"] = e.y
    with open(path, "wb") as fh:
        np.savez_compressed(fh, **arrays)


def load_envs(path):
    """Returns ``(envs, meta)``."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("format") != CACHE_FORMAT or meta.get("version") != CACHE_VERSION:
            raise ValueError(f"{path}: not a version-{CACHE_VERSION} {CACHE_FORMAT} cache")
        envs = [EnvDataset(m["env_id"], data[f"X{i}"], data[f"y{i}"], m["split"], m["n_classes"])
                for i, m in enumerate(meta["envs"])]
    return envs, meta
