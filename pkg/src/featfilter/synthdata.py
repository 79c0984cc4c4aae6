"""Synthetic cardiac-like segmentation scenes.

Each sample is a noisy 1-channel image with four classes: background (0),
a right-ventricle crescent (1), a myocardium ring (2) and a left-ventricle
disk (3). Geometry is rasterised with integer arithmetic and all randomness
comes from a xoshiro256** stream seeded through splitmix64, so a given
``(seed, sample id)`` yields the same sample on every platform.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .tensor import DTYPE, load_fsm1, save_fsm1

BG, RV, MYO, LV = 0, 1, 2, 3
_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & _MASK64


def splitmix64(state):
    """Return ``(new_state, output)`` for one splitmix64 step."""
    state = (state + _GOLDEN) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


class Xoshiro256:
    """xoshiro256** generator seeded from a 64-bit integer via splitmix64."""

    def __init__(self, seed):
        sm = seed & _MASK64
        s = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            s.append(out)
        self.s = s
        self._spare = None

    @classmethod
    def for_sample(cls, seed, sample_id):
        """Independent stream for one sample: seed ``seed + GOLDEN*(id+1)``."""
        return cls((seed + _GOLDEN * (sample_id + 1)) & _MASK64)

    def next_u64(self):
        s0, s1, s2, s3 = self.s
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s = [s0, s1, s2, s3]
        return result

    def random(self):
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def integer(self, lo, hi):
        """Uniform integer in the closed range [lo, hi] (rejection sampling)."""
        span = hi - lo + 1
        if span <= 0:
            raise ValueError(f"empty range [{lo}, {hi}]")
        limit = (1 << 64) - ((1 << 64) % span)
        while True:
            x = self.next_u64()
            if x < limit:
                return lo + x % span

    def normal(self):
        """Standard normal via Box-Muller; the second variate is cached."""
        if self._spare is not None:
            z, self._spare = self._spare, None
            return z
        u1 = 1.0 - self.random()  # (0, 1]
        u2 = self.random()
        r = math.sqrt(-2.0 * math.log(u1))
        self._spare = r * math.sin(2.0 * math.pi * u2)
        return r * math.cos(2.0 * math.pi * u2)


@dataclass
class SceneConfig:
    image_size: int = 64
    num_classes: int = 4
    lv_radius: tuple = (5, 8)
    myo_thickness: tuple = (2, 4)
    rv_radius: tuple = (6, 9)
    rv_overlap: tuple = (3, 5)
    center_jitter: int = 4
    intensity_bg: float = 0.15
    intensity_rv: float = 0.65
    intensity_myo: float = 0.4
    intensity_lv: float = 0.8
    noise_sigma: float = 0.12
    confuser_blobs: int = 2
    confuser_radius: tuple = (2, 4)

    def __post_init__(self):
        for name in ("lv_radius", "myo_thickness", "rv_radius", "rv_overlap", "confuser_radius"):
            lo, hi = (int(v) for v in getattr(self, name))
            if lo > hi or lo < 0:
                raise ValueError(f"{name} must be an increasing non-negative range")
            setattr(self, name, (lo, hi))
        n = self.image_size
        if n < 2 or n & (n - 1):
            raise ValueError(f"image_size must be a power of 2, got {n}")
        if self.num_classes != 4:
            raise ValueError("the scene has exactly 4 classes (BG, RV, MYO, LV)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.lv_radius[0] < 1 or self.myo_thickness[0] < 1 or self.rv_radius[0] < 1:
            raise ValueError("LV radius, MYO thickness and RV radius must be >= 1")
        if self.rv_overlap[1] >= self.rv_radius[0]:
            raise ValueError("rv_overlap must stay below the RV radius")

    def max_extent(self):
        """Largest distance from the heart centre a foreground pixel can reach."""
        outer = self.lv_radius[1] + self.myo_thickness[1]
        rv_dist = outer + self.rv_radius[1] - self.rv_overlap[0]
        return max(outer, rv_dist + self.rv_radius[1])

    def check_feasible(self):
        c = self.image_size // 2
        reach = self.center_jitter + self.max_extent()
        if c - reach < 0 or c + reach > self.image_size - 1:
            raise ValueError(
                f"scene does not fit: structures reach {reach} px from centre {c} "
                f"in a {self.image_size}px image")

    def as_dict(self):
        return asdict(self)


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 1) float64
    label: np.ndarray  # (H, W) int
    id: int


def _disk(yy, xx, cy, cx, r):
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def generate_one(config: SceneConfig, seed, sample_id) -> Sample:
    rng = Xoshiro256.for_sample(seed, sample_id)
    n = config.image_size
    yy, xx = np.mgrid[0:n, 0:n]
    c = n // 2
    j = config.center_jitter
    cy, cx = c + rng.integer(-j, j), c + rng.integer(-j, j)
    r_lv = rng.integer(*config.lv_radius)
    r_out = r_lv + rng.integer(*config.myo_thickness)
    r_rv = rng.integer(*config.rv_radius)
    dist = r_out + r_rv - rng.integer(*config.rv_overlap)
    # RV sits on the left of the heart; offsets are integer so rasterisation is exact
    dy = rng.integer(-(dist // 2), dist // 2)
    dx = -math.isqrt(dist * dist - dy * dy)

    label = np.zeros((n, n), dtype=np.int64)
    label[_disk(yy, xx, cy + dy, cx + dx, r_rv)] = RV
    label[_disk(yy, xx, cy, cx, r_out)] = MYO
    label[_disk(yy, xx, cy, cx, r_lv)] = LV

    means = np.array([config.intensity_bg, config.intensity_rv,
                      config.intensity_myo, config.intensity_lv])
    image = means[label]
    for _ in range(config.confuser_blobs):
        by, bx = rng.integer(0, n - 1), rng.integer(0, n - 1)
        blob = _disk(yy, xx, by, bx, rng.integer(*config.confuser_radius)) & (label == BG)
        image[blob] = config.intensity_myo
    if config.noise_sigma > 0:
        noise = np.array([rng.normal() for _ in range(n * n)]).reshape(n, n)
        image = np.clip(image + config.noise_sigma * noise, 0.0, 1.0)
    return Sample(image[..., None].astype(DTYPE), label, sample_id)


def generate(config: SceneConfig, count, seed):
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    config.check_feasible()
    return [generate_one(config, seed, i) for i in range(count)]


# -- augmentation -------------------------------------------------------------

def _remap(arr, src_y, src_x, fill):
    h, w = arr.shape[:2]
    ok = (src_y >= 0) & (src_y < h) & (src_x >= 0) & (src_x < w)
    out = np.full(arr.shape, fill, dtype=arr.dtype)
    out[ok] = arr[src_y[ok], src_x[ok]]
    return out


def rotate(arr, angle_deg, fill=0):
    """Nearest-neighbour rotation about the image centre (inverse mapping)."""
    h, w = arr.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    t = math.radians(angle_deg)
    ct, st = math.cos(t), math.sin(t)
    sy = np.rint(cy + (yy - cy) * ct - (xx - cx) * st).astype(int)
    sx = np.rint(cx + (yy - cy) * st + (xx - cx) * ct).astype(int)
    return _remap(arr, sy, sx, fill)


def translate(arr, dy, dx, fill=0):
    h, w = arr.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    return _remap(arr, yy - dy, xx - dx, fill)


def normalize(image):
    """Zero-mean, unit-variance copy of ``image`` (constant images map to 0)."""
    image = np.asarray(image, dtype=DTYPE)
    sd = image.std()
    out = image - image.mean()
    return out / sd if sd > 0 else out


def augment(sample: Sample, mode, seed=0, angle=None, shift=None) -> Sample:
    """Jointly transform image and label.

    ``mode`` is ``rotate`` (angle drawn in [-15, 15] degrees unless given),
    ``translate`` (integer shift drawn in [-4, 4] per axis unless given) or
    ``normalize`` (image only). Both image and label use nearest-neighbour
    sampling, so the label stays registered with the image.
    """
    rng = Xoshiro256(seed)
    if mode == "rotate":
        if angle is None:
            angle = -15.0 + 30.0 * rng.random()
        img = rotate(sample.image, angle, fill=0.0)
        lab = rotate(sample.label, angle, fill=BG)
    elif mode == "translate":
        if shift is None:
            shift = (rng.integer(-4, 4), rng.integer(-4, 4))
        img = translate(sample.image, *shift, fill=0.0)
        lab = translate(sample.label, *shift, fill=BG)
    elif mode == "normalize":
        img, lab = normalize(sample.image), sample.label.copy()
    else:
        raise ValueError(f"unknown augmentation mode {mode!r}")
    return Sample(img, lab, sample.id)


def split(samples, train_fraction=0.8, seed=0):
    """Deterministic shuffled split into ``(train, validation)``."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    n = len(samples)
    n_train = int(round(n * train_fraction))
    if n_train < 1 or n_train >= n:
        raise ValueError(f"cannot split {n} samples at fraction {train_fraction}")
    rng = Xoshiro256(seed)
    order = list(range(n))
    for i in range(n - 1, 0, -1):  # Fisher-Yates
        k = rng.integer(0, i)
        order[i], order[k] = order[k], order[i]
    train = sorted(order[:n_train])
    val = sorted(order[n_train:])
    return [samples[i] for i in train], [samples[i] for i in val]


# -- on-disk format -------------------------------------------------------------

def write_pgm(path, label, maxval):
    label = np.asarray(label)
    if label.min() < 0 or label.max() > maxval:
        raise ValueError(f"label values must lie in 0..{maxval}")
    h, w = label.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode() + label.astype(np.uint8).tobytes())


def read_pgm(path):
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos)
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval > 255:
        raise ValueError(f"{path}: 16-bit PGM not supported")
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos + 1)
    return pixels.reshape(h, w).astype(np.int64), maxval


def save_dataset(root, train, val, num_classes=4):
    """Write images (FSM1), labels (PGM) and ``manifest.txt``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    lines = []
    for part, samples in (("train", train), ("val", val)):
        for s in samples:
            img = f"images/{s.id:05d}.fsm"
            lab = f"labels/{s.id:05d}.pgm"
            save_fsm1(root / img, s.image)
            write_pgm(root / lab, s.label, num_classes - 1)
            lines.append(f"{s.id},{img},{lab},{part}")
    lines.sort(key=lambda ln: int(ln.split(",")[0]))
    manifest = root / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_dataset(root):
    """Read a dataset directory back into ``(train, val)`` sample lists."""
    root = Path(root)
    manifest = root / "manifest.txt"
    if not manifest.is_file():
        raise FileNotFoundError(f"dataset manifest not found: {manifest}")
    parts = {"train": [], "val": []}
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        sid, img, lab, part = line.split(",")
        if part not in parts:
            raise ValueError(f"{manifest}: unknown split {part!r}")
        label, _ = read_pgm(root / lab)
        parts[part].append(Sample(load_fsm1(root / img), label, int(sid)))
    return parts["train"], parts["val"]
