"""Training loop, evaluation, checkpoints and run reports."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..checkpoint import load_parameters, save_parameters
from ..data import Dataset, Vocabulary, build_similarity_matrix, default_class_names, generate_synthetic_dataset, surrogate_encoder_for
from ..hashing import LOSS_NAMES, pack_codes, total_loss
from ..retrieval import RetrievalReport, RetrievalTask, evaluate_task
from .config import ExperimentConfig
from .model import PromptHashModel

log = logging.getLogger(__name__)

OPTIMIZER = "adam"


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, parts: dict[str, float]):
        self.step = step
        self.parts = parts
        super().__init__(f"non-finite loss at step {step}: {parts}")


@dataclass
class RunReport:
    variant: str
    seed: int
    config_hash: str
    bits: int
    steps: int
    optimizer: str = OPTIMIZER
    losses: dict[str, list[float]] = field(default_factory=dict)
    # metrics[str(K)][direction] -> RetrievalReport as dict
    metrics: dict[str, dict[str, dict]] = field(default_factory=dict)
    wall_clock: float = 0.0

    def map(self, direction: str, bits: int | None = None) -> float:
        return self.metrics[str(bits or self.bits)][direction]["mAP"]

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls(**json.loads(text))

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path


@dataclass
class TrainResult:
    model: PromptHashModel
    report: RunReport
    dataset: Dataset


class SplitTensors:
    """Tensors for one dataset split."""

    def __init__(self, dataset: Dataset, split: str):
        idx = dataset.split_indices(split)
        self.image = torch.from_numpy(dataset.image_features[idx])
        self.text = torch.from_numpy(dataset.text_features[idx])
        self.tokens = torch.from_numpy(dataset.prompt_tokens[idx])
        self.labels = dataset.labels[idx]

    def __len__(self) -> int:
        return len(self.labels)


def token_table(dataset: Dataset) -> torch.Tensor:
    return torch.from_numpy(surrogate_encoder_for(dataset).token_embedding.astype(np.float32))


def build_model(config: ExperimentConfig, dataset: Dataset) -> PromptHashModel:
    torch.manual_seed(config.seed)
    return PromptHashModel(config, token_table(dataset))


def train(config: ExperimentConfig, dataset: Dataset | None = None, log_every: int = 0) -> TrainResult:
    """Adam on the weighted objective with a fixed, seed-determined batch order."""
    dataset = dataset or generate_synthetic_dataset(config.dataset)
    model = build_model(config, dataset)
    backbone, modules = model.parameter_groups()
    groups = [g for g in ({"params": backbone, "lr": config.lr_backbone}, {"params": modules, "lr": config.lr_modules}) if g["params"]]
    optimizer = torch.optim.Adam(groups)

    train_split = SplitTensors(dataset, "train")
    n = len(train_split)
    m = min(config.batch_size, n)
    rng = np.random.default_rng([config.seed, 3])
    weights = config.weights

    history: dict[str, list[float]] = {name: [] for name in (*LOSS_NAMES, "total")}
    order = np.empty(0, dtype=np.int64)
    start = time.perf_counter()
    model.train()
    for step in range(config.steps):
        if len(order) < m:
            order = rng.permutation(n)
        batch, order = order[:m], order[m:]
        S = torch.from_numpy(build_similarity_matrix(train_split.labels[batch], train_split.labels[batch]))
        out = model(train_split.image[batch], train_split.text[batch], train_split.tokens[batch])
        parts = model.losses(out, S, num_samples=n)
        loss = total_loss(parts, weights)

        values = {k: float(v.detach()) for k, v in parts.items()}
        values["total"] = float(loss.detach())
        if not all(math.isfinite(v) for v in values.values()):
            raise TrainingDiverged(step, values)
        for k, v in values.items():
            history[k].append(v)

        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        if log_every and step % log_every == 0:
            log.info("step %d total %.4f", step, values["total"])

    model.eval()
    report = RunReport(
        variant=config.variant,
        seed=config.seed,
        config_hash=config.config_hash(),
        bits=config.bits,
        steps=config.steps,
        losses=history,
        wall_clock=time.perf_counter() - start,
    )
    return TrainResult(model, report, dataset)


@torch.no_grad()
def encode_split(model: PromptHashModel, split: SplitTensors, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Packed image and text codes for every sample of ``split``."""
    model.eval()
    image_codes, text_codes = [], []
    for s in range(0, len(split), batch_size):
        sl = slice(s, s + batch_size)
        b_v, b_t = model.encode(split.image[sl], split.text[sl], split.tokens[sl])
        image_codes.append(pack_codes(b_v.numpy().astype(np.int8)))
        text_codes.append(pack_codes(b_t.numpy().astype(np.int8)))
    return np.concatenate(image_codes), np.concatenate(text_codes)


def evaluate(model: PromptHashModel, dataset: Dataset, bits: int | None = None, pr_mode: str = "radius") -> dict[str, dict[str, dict]]:
    """I2T and T2I retrieval of the query split against the retrieval split."""
    if bits is not None and bits != model.bits:
        raise ValueError(f"checkpoint produces {model.bits}-bit codes, config asks for {bits}")
    query, database = SplitTensors(dataset, "query"), SplitTensors(dataset, "retrieval")
    q_img, q_txt = encode_split(model, query)
    d_img, d_txt = encode_split(model, database)
    relevance = build_similarity_matrix(query.labels, database.labels)
    reports: dict[str, dict] = {}
    for direction, q, d in (("I2T", q_img, d_txt), ("T2I", q_txt, d_img)):
        task = RetrievalTask(direction, q, d, relevance, model.bits)
        reports[direction] = evaluate_task(task, pr_mode).to_dict()
    return {str(model.bits): reports}


def train_and_evaluate(config: ExperimentConfig, dataset: Dataset | None = None) -> TrainResult:
    result = train(config, dataset)
    result.report.metrics.update(evaluate(result.model, result.dataset))
    return result


def save_checkpoint(model: PromptHashModel, directory: str | Path, class_names: list[str] | None = None) -> Path:
    directory = Path(directory)
    names = class_names or default_class_names(model.config.dataset.num_classes)
    meta = {"config": model.config.to_dict(), "class_names": names}
    return save_parameters(model.state_dict(), directory / "model", meta)


def load_checkpoint(directory: str | Path) -> PromptHashModel:
    state, meta = load_parameters(Path(directory) / "model")
    config = ExperimentConfig.from_dict(meta["config"])
    vocab = Vocabulary.for_classes(meta["class_names"])
    model = PromptHashModel(config, torch.zeros(len(vocab), config.dataset.embed_dim))
    model.load_state_dict(state)
    model.eval()
    return model


def retrieval_reports(report: RunReport) -> list[RetrievalReport]:
    return [RetrievalReport.from_dict(r) for per_k in report.metrics.values() for r in per_k.values()]
