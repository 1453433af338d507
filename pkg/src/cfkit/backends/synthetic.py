"""Synthetic desk-scale image world with a planted spurious correlation.

Each class has a distinctive foreground pattern and, in the biased training
distribution, a fixed background color. Out-of-distribution images keep the
foreground but draw a mismatched background color, so a classifier that leans
on background color degrades while one that reads the foreground does not.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CLASS_NAMES = (
    "heron", "lynx", "otter", "viper", "bison", "falcon", "gecko", "marmot",
    "puffin", "stoat", "tapir", "urchin", "walrus", "ibex", "koala", "dingo",
)

COLOR_NAMES = (
    "red", "orange", "amber", "yellow", "lime", "green", "jade", "teal",
    "cyan", "azure", "blue", "violet", "purple", "magenta", "pink", "crimson",
)

DOMAIN_WORDS = ("photo", "sketch", "paint")

FILLER_PHRASES = (
    "captured in bright daylight",
    "seen from a short distance",
    "under a clear open sky",
    "during a quiet afternoon",
    "framed neatly at eye level",
    "with soft natural light",
    "shown in sharp focus",
    "standing near the center",
    "with fine visible detail",
    "on an ordinary calm day",
)


def color_rgb(name: str) -> np.ndarray:
    """Palette color as an RGB triple in [0, 1]; hues evenly spaced."""
    i = COLOR_NAMES.index(name)
    h = i / len(COLOR_NAMES)
    return np.array(colorsys.hsv_to_rgb(h, 0.8, 0.9))


@dataclass
class SyntheticWorld:
    """Deterministic factory for images, captions and caption renderings."""

    seed: int = 0
    image_size: int = 16
    n_classes: int = 16
    fg_size: int = 6
    fg_contrast: float = 0.5
    noise_std: float = 0.06

    def __post_init__(self):
        if not 1 <= self.n_classes <= len(CLASS_NAMES):
            raise ValueError(f"n_classes must be in [1, {len(CLASS_NAMES)}]")
        if self.fg_size >= self.image_size:
            raise ValueError("foreground patch must be smaller than the image")
        self.classes = CLASS_NAMES[: self.n_classes]
        self.colors = COLOR_NAMES[: self.n_classes]
        self.class_color = dict(zip(self.classes, self.colors))
        rng = np.random.default_rng(self.seed)
        # Per-class foreground patterns, centered around mid-gray so the
        # background color stays the dominant linear feature.
        self.patterns = {}
        for name in self.classes:
            raw = rng.random((3, self.fg_size, self.fg_size))
            self.patterns[name] = 0.5 + self.fg_contrast * (raw - 0.5)

    # -- rendering ---------------------------------------------------------

    def _fg_slice(self) -> tuple[slice, slice]:
        lo = (self.image_size - self.fg_size) // 2
        return slice(lo, lo + self.fg_size), slice(lo, lo + self.fg_size)

    def render_clean(self, class_name: str | None, color_name: str | None,
                     domain: str = "photo") -> np.ndarray:
        """Noise-free (3, H, W) rendering of a class on a colored background."""
        rgb = color_rgb(color_name) if color_name else np.full(3, 0.5)
        img = np.tile(rgb[:, None, None], (1, self.image_size, self.image_size))
        if class_name:
            rs, cs = self._fg_slice()
            img[:, rs, cs] = self.patterns[class_name]
        if domain == "sketch":
            img[:] = img.mean(axis=0, keepdims=True)
        elif domain == "paint":
            img = 0.5 + 0.8 * (img - 0.5)
        return np.clip(img, 0.0, 1.0)

    def make_image(self, class_name: str, color_name: str, rng: np.random.Generator) -> np.ndarray:
        clean = self.render_clean(class_name, color_name)
        noisy = clean + rng.normal(0.0, self.noise_std, clean.shape)
        return np.clip(noisy, 0.0, 1.0)

    def render_from_caption(self, text: str) -> np.ndarray:
        """Deterministic caption -> clean image map used as generator conditioning."""
        tokens = text.lower().split()
        cls = next((t for t in tokens if t in self.class_color), None)
        color = next((t for t in tokens if t in set(self.colors)), None)
        domain = next((t for t in tokens if t in DOMAIN_WORDS), "photo")
        return self.render_clean(cls, color, domain)

    # -- recognition helpers for the toy captioner -------------------------

    def nearest_class(self, image: np.ndarray) -> str:
        rs, cs = self._fg_slice()
        patch = image[:, rs, cs]
        dists = {c: float(np.sum((patch - p) ** 2)) for c, p in self.patterns.items()}
        return min(dists, key=lambda c: (dists[c], self.classes.index(c)))

    def nearest_color(self, image: np.ndarray) -> str:
        border = np.concatenate(
            [image[:, 0, :], image[:, -1, :], image[:, :, 0], image[:, :, -1]], axis=1
        )
        mean = border.mean(axis=1)
        dists = {c: float(np.sum((mean - color_rgb(c)) ** 2)) for c in self.colors}
        return min(dists, key=lambda c: (dists[c], self.colors.index(c)))

    # -- persistence -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "image_size": self.image_size,
            "n_classes": self.n_classes,
            "fg_size": self.fg_size,
            "fg_contrast": self.fg_contrast,
            "noise_std": self.noise_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticWorld":
        return cls(**d)


def load_world(dataset_dir: str | Path) -> SyntheticWorld:
    return SyntheticWorld.from_dict(json.loads((Path(dataset_dir) / "world.json").read_text()))


def generate_dataset(
    out_dir: str | Path,
    seed: int = 0,
    n_classes: int = 16,
    n_focus: int = 4,
    n_pretrain_per_class: int = 40,
    n_per_class: int = 50,
    image_size: int = 16,
    fg_size: int = 6,
    fg_contrast: float = 0.5,
    noise_std: float = 0.06,
) -> dict:
    """Write the synthetic dataset to disk; returns a summary dict.

    Layout: world.json, images/*.png, and JSON-lines manifests
    pretrain / train / test / ood / hybrid of {"image": relpath, "label": cls}.
    The focus classes (first ``n_focus``) populate train/test/ood/hybrid;
    pretrain covers every class with the biased backgrounds.
    """
    from PIL import Image

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    world = SyntheticWorld(
        seed=seed, image_size=image_size, n_classes=n_classes,
        fg_size=fg_size, fg_contrast=fg_contrast, noise_std=noise_std,
    )
    (out / "world.json").write_text(json.dumps(world.to_dict(), indent=2, sort_keys=True))
    rng = np.random.default_rng(seed + 1)
    focus = world.classes[:n_focus]

    def save_image(arr: np.ndarray, name: str) -> str:
        rel = f"images/{name}.png"
        u8 = np.round(arr * 255.0).astype(np.uint8)
        Image.fromarray(np.moveaxis(u8, 0, -1), mode="RGB").save(out / rel)
        return rel

    def write_manifest(name: str, rows: list[dict]) -> None:
        with (out / f"{name}.jsonl").open("w") as f:
            for row in rows:
                f.write(json.dumps(row, sort_keys=True) + "\n")

    pretrain = []
    for cls in world.classes:
        for i in range(n_pretrain_per_class):
            img = world.make_image(cls, world.class_color[cls], rng)
            pretrain.append({"image": save_image(img, f"pre-{cls}-{i:03d}"), "label": cls})
    write_manifest("pretrain", pretrain)

    train, test = [], []
    for cls in focus:
        for i in range(n_per_class):
            img = world.make_image(cls, world.class_color[cls], rng)
            train.append({"image": save_image(img, f"train-{cls}-{i:03d}"), "label": cls})
        for i in range(n_per_class):
            img = world.make_image(cls, world.class_color[cls], rng)
            test.append({"image": save_image(img, f"test-{cls}-{i:03d}"), "label": cls})
    write_manifest("train", train)
    write_manifest("test", test)

    ood = []
    for cls in focus:
        own = world.class_color[cls]
        others = [c for c in world.colors if c != own]
        for i in range(n_per_class):
            color = others[int(rng.integers(len(others)))]
            img = world.make_image(cls, color, rng)
            ood.append({"image": save_image(img, f"ood-{cls}-{i:03d}"), "label": cls})
    write_manifest("ood", ood)

    # Hybrid: alternate in-distribution test and OOD items.
    hybrid = []
    for a, b in zip(test, ood):
        hybrid.extend([a, b])
    write_manifest("hybrid", hybrid)

    return {
        "dataset_dir": str(out),
        "classes": list(world.classes),
        "focus_classes": list(focus),
        "counts": {
            "pretrain": len(pretrain), "train": len(train),
            "test": len(test), "ood": len(ood), "hybrid": len(hybrid),
        },
    }
