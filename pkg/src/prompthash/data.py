"""Synthetic multimodal datasets, prompt rendering and frozen surrogate encoders.

A sample's latent vector is the sum of fixed per-class anchors for its active
labels plus Gaussian noise.  The surrogate encoders are frozen affine maps from
that latent (plus per-modality noise) to token sequences, standing in for the
pretrained image and text backbones.  Datasets can be written to and read
back from disk, so features exported from a real backbone can be dropped in.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MANIFEST_VERSION = 1
FEATURE_MAGIC = b"PHDF"

PROMPT_TEMPLATE = "This is an image containing"
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

# MIRFLICKR-25K category names; larger class counts fall back to generic names.
DEFAULT_CLASS_NAMES = (
    "animals", "baby", "bird", "car", "clouds", "dog", "female", "flower",
    "food", "indoor", "lake", "male", "night", "people", "plant_life",
    "portrait", "river", "sea", "sky", "structures", "sunset", "transport",
    "tree", "water",
)


class DatasetConfigError(ValueError):
    """Raised for inconsistent dataset sizes or shapes."""


@dataclass
class DatasetConfig:
    num_classes: int = 8
    labels_per_sample: tuple[int, int] = (1, 3)
    train_size: int = 512
    query_size: int = 128
    # None: retrieval takes every pool sample not used as a query.
    retrieval_size: int | None = 512
    # None: pool is exactly query + retrieval.
    pool_size: int | None = None
    visual_tokens: int = 9
    text_tokens: int = 16
    prompt_tokens: int = 16
    embed_dim: int = 32
    noise_sigma: float = 0.3
    seed: int = 0

    def __post_init__(self):
        self.labels_per_sample = tuple(self.labels_per_sample)

    def resolved_sizes(self) -> tuple[int, int, int, int]:
        """Return (pool, train, query, retrieval) after filling defaults and validating."""
        if self.num_classes < 1:
            raise DatasetConfigError("num_classes must be >= 1")
        lo, hi = self.labels_per_sample
        if not 1 <= lo <= hi <= self.num_classes:
            raise DatasetConfigError(
                f"labels_per_sample {self.labels_per_sample} must satisfy 1 <= lo <= hi <= C"
            )
        for name in ("visual_tokens", "text_tokens", "prompt_tokens", "embed_dim"):
            if getattr(self, name) < 1:
                raise DatasetConfigError(f"{name} must be >= 1")
        if self.noise_sigma < 0:
            raise DatasetConfigError("noise_sigma must be nonnegative")

        query = self.query_size
        if self.retrieval_size is None:
            if self.pool_size is None:
                raise DatasetConfigError("either retrieval_size or pool_size is required")
            retrieval = self.pool_size - query
        else:
            retrieval = self.retrieval_size
        pool = self.pool_size if self.pool_size is not None else query + retrieval
        if self.train_size <= 0 or query <= 0 or retrieval <= 0:
            raise DatasetConfigError(
                f"empty split (train={self.train_size}, query={query}, retrieval={retrieval})"
            )
        if query + retrieval > pool:
            raise DatasetConfigError(
                f"query ({query}) + retrieval ({retrieval}) exceeds pool ({pool})"
            )
        if self.train_size > retrieval:
            raise DatasetConfigError("train split is drawn from retrieval and cannot exceed it")
        return pool, self.train_size, query, retrieval


@dataclass
class Sample:
    id: int
    label: np.ndarray
    prompt_text: str
    latent: np.ndarray


@dataclass
class FeatureBundle:
    image: np.ndarray  # (L^v, D)
    text: np.ndarray  # (L^t, D)
    prompt_tokens: np.ndarray  # (L^p,)


class Vocabulary:
    """Closed whitespace vocabulary over the prompt template and class names."""

    def __init__(self, words: Sequence[str]):
        self.words = [PAD_TOKEN, UNK_TOKEN]
        for w in words:
            if w not in self.words:
                self.words.append(w)
        self._index = {w: i for i, w in enumerate(self.words)}

    @classmethod
    def for_classes(cls, class_names: Sequence[str]) -> "Vocabulary":
        return cls([*PROMPT_TEMPLATE.split(), ",", *class_names])

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    def __len__(self) -> int:
        return len(self.words)

    def lookup(self, word: str) -> int:
        return self._index.get(word, self.unk_id)


def default_class_names(num_classes: int) -> list[str]:
    names = list(DEFAULT_CLASS_NAMES[:num_classes])
    names += [f"class{i}" for i in range(len(names), num_classes)]
    return names


def render_prompt_text(label: np.ndarray, class_names: Sequence[str]) -> str:
    active = np.flatnonzero(np.asarray(label))
    if active.size == 0:
        raise ValueError("prompt rendering needs at least one active label")
    return f"{PROMPT_TEMPLATE} " + ", ".join(class_names[c] for c in active)


def tokenize(text: str) -> list[str]:
    return text.replace(",", " , ").split()


def render_prompt_tokens(
    label: np.ndarray, class_names: Sequence[str], vocab: Vocabulary, length: int
) -> np.ndarray:
    """Render the prompt template for ``label`` and return exactly ``length`` token ids.

    Unknown words map to the unknown token; long prompts lose trailing tokens,
    short ones are right-padded.
    """
    ids = [vocab.lookup(w) for w in tokenize(render_prompt_text(label, class_names))][:length]
    ids += [vocab.pad_id] * (length - len(ids))
    return np.asarray(ids, dtype=np.int64)


def build_similarity_matrix(labels_a: np.ndarray, labels_b: np.ndarray) -> np.ndarray:
    """S_ij = 1 iff rows i of ``labels_a`` and j of ``labels_b`` share a class."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"label matrices must be 2-D with equal columns, got {a.shape} and {b.shape}")
    return (a.astype(np.int64) @ b.astype(np.int64).T >= 1).astype(np.uint8)


class SurrogateEncoder:
    """Frozen affine token encoders for both modalities plus a prompt embedding table.

    Parameters are drawn once from ``seed`` and never updated.
    """

    def __init__(self, config: DatasetConfig, vocab_size: int):
        d = config.embed_dim
        rng = np.random.default_rng([config.seed, 1])
        scale = 1.0 / np.sqrt(d)
        self.seed = config.seed
        self.noise_sigma = config.noise_sigma
        self.image_proj = rng.standard_normal((d, config.visual_tokens * d)) * scale
        self.image_bias = 0.1 * rng.standard_normal((config.visual_tokens, d))
        self.text_proj = rng.standard_normal((d, config.text_tokens * d)) * scale
        self.text_bias = 0.1 * rng.standard_normal((config.text_tokens, d))
        self.token_embedding = rng.standard_normal((vocab_size, d)) * scale
        for arr in (self.image_proj, self.image_bias, self.text_proj, self.text_bias, self.token_embedding):
            arr.setflags(write=False)
        self.visual_tokens = config.visual_tokens
        self.text_tokens = config.text_tokens
        self.embed_dim = d

    def modality_noise(self, sample_id: int) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng([self.seed, 2, int(sample_id)])
        noise = self.noise_sigma * rng.standard_normal((2, self.embed_dim))
        return noise[0], noise[1]

    def encode(self, ids: Sequence[int], latents: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Encode a batch of latents into (M, L^v, D) and (M, L^t, D) float32 arrays."""
        latents = np.asarray(latents, dtype=np.float64).reshape(len(ids), self.embed_dim)
        noise = np.stack([np.stack(self.modality_noise(i)) for i in ids]) if len(ids) else np.zeros((0, 2, self.embed_dim))
        zv = latents + noise[:, 0]
        zt = latents + noise[:, 1]
        fv = (zv @ self.image_proj).reshape(-1, self.visual_tokens, self.embed_dim) + self.image_bias
        ft = (zt @ self.text_proj).reshape(-1, self.text_tokens, self.embed_dim) + self.text_bias
        return fv.astype(np.float32), ft.astype(np.float32)


def encode_surrogate(sample: Sample, encoder: SurrogateEncoder, vocab: Vocabulary, class_names: Sequence[str], prompt_length: int) -> FeatureBundle:
    fv, ft = encoder.encode([sample.id], sample.latent[None])
    tokens = render_prompt_tokens(sample.label, class_names, vocab, prompt_length)
    return FeatureBundle(image=fv[0], text=ft[0], prompt_tokens=tokens)


@dataclass
class Dataset:
    """Pool of samples with precomputed features and train/query/retrieval index splits.

    Pool order is query samples first, then retrieval samples; the train split
    is the leading ``train_size`` retrieval samples.
    """

    config: DatasetConfig
    class_names: list[str]
    labels: np.ndarray  # (P, C) uint8
    image_features: np.ndarray  # (P, L^v, D) float32
    text_features: np.ndarray  # (P, L^t, D) float32
    prompt_tokens: np.ndarray  # (P, L^p) int64
    latents: np.ndarray | None = None
    vocab: Vocabulary = field(init=False)

    def __post_init__(self):
        self.vocab = Vocabulary.for_classes(self.class_names)

    @property
    def sizes(self) -> dict[str, int]:
        _, train, query, retrieval = self.config.resolved_sizes()
        return {"train": train, "query": query, "retrieval": retrieval}

    def split_indices(self, split: str) -> np.ndarray:
        s = self.sizes
        if split == "query":
            return np.arange(s["query"])
        if split == "retrieval":
            return np.arange(s["query"], s["query"] + s["retrieval"])
        if split == "train":
            return np.arange(s["query"], s["query"] + s["train"])
        raise KeyError(f"unknown split {split!r}")

    def sample(self, index: int) -> Sample:
        latent = self.latents[index] if self.latents is not None else np.zeros(self.config.embed_dim)
        return Sample(
            id=int(index),
            label=self.labels[index],
            prompt_text=render_prompt_text(self.labels[index], self.class_names),
            latent=latent,
        )


def generate_synthetic_dataset(config: DatasetConfig, class_names: Sequence[str] | None = None) -> Dataset:
    pool, _, query, retrieval = config.resolved_sizes()
    c, d = config.num_classes, config.embed_dim
    names = list(class_names) if class_names is not None else default_class_names(c)
    if len(names) != c:
        raise DatasetConfigError(f"expected {c} class names, got {len(names)}")

    rng = np.random.default_rng(config.seed)
    anchors = rng.standard_normal((c, d))
    lo, hi = config.labels_per_sample
    n_active = rng.integers(lo, hi + 1, size=pool)
    order = np.argsort(rng.random((pool, c)), axis=1)
    labels = np.zeros((pool, c), dtype=np.uint8)
    rows = np.repeat(np.arange(pool), n_active)
    cols = np.concatenate([order[i, :n] for i, n in enumerate(n_active)])
    labels[rows, cols] = 1
    latents = labels.astype(np.float64) @ anchors + config.noise_sigma * rng.standard_normal((pool, d))

    # pool sample ids are assigned after shuffling so splits are contiguous
    perm = rng.permutation(pool)[: query + retrieval]
    labels, latents = labels[perm], latents[perm]

    vocab = Vocabulary.for_classes(names)
    encoder = SurrogateEncoder(config, len(vocab))
    fv, ft = encoder.encode(range(len(perm)), latents)
    tokens = np.stack([render_prompt_tokens(l, names, vocab, config.prompt_tokens) for l in labels])
    return Dataset(config, names, labels, fv, ft, tokens, latents)


def surrogate_encoder_for(dataset: Dataset) -> SurrogateEncoder:
    return SurrogateEncoder(dataset.config, len(dataset.vocab))


# ---------------------------------------------------------------------------
# on-disk format: manifest.json + features.phdf + labels.csv


def save_dataset(dataset: Dataset, directory: str | Path) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    cfg = dataset.config
    manifest = {
        "version": MANIFEST_VERSION,
        "C": cfg.num_classes,
        "D": cfg.embed_dim,
        "L_v": cfg.visual_tokens,
        "L_t": cfg.text_tokens,
        "L_p": cfg.prompt_tokens,
        "splits": dataset.sizes,
        "seed": cfg.seed,
        "class_names": dataset.class_names,
        "generator": asdict(cfg),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    with open(out / "features.phdf", "wb") as fh:
        fh.write(FEATURE_MAGIC)
        for fv, ft in zip(dataset.image_features, dataset.text_features):
            fh.write(np.ascontiguousarray(fv, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(ft, dtype="<f4").tobytes())
    with open(out / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "labels"])
        for i, row in enumerate(dataset.labels):
            writer.writerow([i, ",".join(str(c) for c in np.flatnonzero(row))])
    return out


def load_dataset(directory: str | Path) -> Dataset:
    src = Path(directory)
    manifest = json.loads((src / "manifest.json").read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise DatasetConfigError(f"unsupported manifest version {manifest.get('version')}")
    splits = manifest["splits"]
    gen = manifest.get("generator", {})
    config = DatasetConfig(
        num_classes=manifest["C"],
        labels_per_sample=tuple(gen.get("labels_per_sample", (1, manifest["C"]))),
        train_size=splits["train"],
        query_size=splits["query"],
        retrieval_size=splits["retrieval"],
        visual_tokens=manifest["L_v"],
        text_tokens=manifest["L_t"],
        prompt_tokens=manifest["L_p"],
        embed_dim=manifest["D"],
        noise_sigma=gen.get("noise_sigma", 0.0),
        seed=manifest["seed"],
    )
    n = splits["query"] + splits["retrieval"]
    d, lv, lt = config.embed_dim, config.visual_tokens, config.text_tokens

    raw = (src / "features.phdf").read_bytes()
    if raw[:4] != FEATURE_MAGIC:
        raise DatasetConfigError("feature file has wrong magic")
    per_sample = (lv + lt) * d
    floats = np.frombuffer(raw, dtype="<f4", offset=4)
    if floats.size != n * per_sample:
        raise DatasetConfigError(f"feature file holds {floats.size} floats, expected {n * per_sample}")
    floats = floats.reshape(n, per_sample)
    fv = floats[:, : lv * d].reshape(n, lv, d).astype(np.float32)
    ft = floats[:, lv * d :].reshape(n, lt, d).astype(np.float32)

    labels = np.zeros((n, config.num_classes), dtype=np.uint8)
    with open(src / "labels.csv", newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            idx = int(row[0])
            for c in row[1].split(","):
                if c:
                    labels[idx, int(c)] = 1
    if (labels.sum(axis=1) == 0).any():
        raise DatasetConfigError("every sample needs at least one active label")

    names = list(manifest["class_names"])
    vocab = Vocabulary.for_classes(names)
    tokens = np.stack([render_prompt_tokens(l, names, vocab, config.prompt_tokens) for l in labels])
    return Dataset(config, names, labels, fv, ft, tokens)
