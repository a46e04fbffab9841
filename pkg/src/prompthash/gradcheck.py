"""Central finite-difference gradient checking for modules and loss functions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import torch


@dataclass
class TensorError:
    name: str
    max_rel_error: float
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float


@dataclass
class GradCheckReport:
    passed: bool
    tolerance: float
    max_rel_error: float
    errors: list[TensorError] = field(default_factory=list)
    failure: str | None = None

    @property
    def worst(self) -> TensorError | None:
        return max(self.errors, key=lambda e: e.max_rel_error, default=None)

    def summary(self) -> str:
        if self.failure:
            return f"FAIL ({self.failure})"
        worst = self.worst
        where = f" at {worst.name}{list(worst.worst_index)}" if worst else ""
        status = "pass" if self.passed else "FAIL"
        return f"{status} max_rel_error={self.max_rel_error:.3e}{where} (tol {self.tolerance:g})"


def _scalarize(out, weights: list[torch.Tensor] | None, generator: torch.Generator):
    if isinstance(out, dict):
        out = [out[k] for k in sorted(out)]
    outs = out if isinstance(out, (tuple, list)) else (out,)
    if weights is None:
        weights = [torch.randn(o.shape, dtype=o.dtype, generator=generator) for o in outs]
    return sum((o * w).sum() for o, w in zip(outs, weights)), weights


def check_gradients(
    fn: Callable[..., torch.Tensor],
    inputs: Mapping[str, torch.Tensor] | None = None,
    params: Iterable[tuple[str, torch.Tensor]] = (),
    tolerance: float = 1e-4,
    step: float = 1e-5,
    abs_floor: float = 1e-6,
    seed: int = 0,
) -> GradCheckReport:
    """Compare autograd against central differences for every input and parameter.

    ``fn`` is called with ``inputs`` as keyword arguments.  Non-scalar outputs
    are reduced with fixed random weights.  Per tensor the error is
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|, abs_floor)``.
    All tensors must be float64.
    """
    inputs = dict(inputs or {})
    targets: list[tuple[str, torch.Tensor]] = []
    for name, t in inputs.items():
        if t.is_floating_point():
            inputs[name] = t = t.detach().clone().requires_grad_(True)
            targets.append((name, t))
    targets += [(name, p) for name, p in params if p.requires_grad]
    for name, t in targets:
        if t.dtype != torch.float64:
            raise ValueError(f"gradient checks need float64 tensors; {name} is {t.dtype}")

    gen = torch.Generator().manual_seed(seed)
    for _, t in targets:
        t.grad = None
    loss, weights = _scalarize(fn(**inputs), None, gen)
    if not torch.isfinite(loss):
        return GradCheckReport(False, tolerance, float("inf"), failure="non-finite objective")
    grads = torch.autograd.grad(loss, [t for _, t in targets], allow_unused=True)

    def objective() -> float:
        with torch.no_grad():
            return float(_scalarize(fn(**inputs), weights, gen)[0])

    report = GradCheckReport(True, tolerance, 0.0)
    for (name, t), g in zip(targets, grads):
        analytic = torch.zeros_like(t) if g is None else g.detach()
        if not torch.isfinite(analytic).all():
            bad = tuple(int(i) for i in torch.nonzero(~torch.isfinite(analytic))[0])
            return GradCheckReport(False, tolerance, float("inf"), report.errors, f"non-finite gradient in {name}{list(bad)}")
        numeric = torch.zeros_like(t)
        flat = t.data.view(-1)
        num_flat = numeric.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            plus = objective()
            flat[i] = orig - step
            minus = objective()
            flat[i] = orig
            num_flat[i] = (plus - minus) / (2 * step)
        diff = (analytic - numeric).abs()
        scale = max(analytic.abs().max().item(), numeric.abs().max().item(), abs_floor)
        rel = diff / scale
        idx = int(torch.argmax(rel.reshape(-1)))
        worst_index = tuple(int(i) for i in torch.unravel_index(torch.tensor(idx), t.shape)) if t.dim() else ()
        err = TensorError(name, float(rel.reshape(-1)[idx]), worst_index,
                          float(analytic.reshape(-1)[idx]), float(numeric.reshape(-1)[idx]))
        report.errors.append(err)
        report.max_rel_error = max(report.max_rel_error, err.max_rel_error)
    report.passed = report.max_rel_error <= tolerance
    return report


def check_module(module: torch.nn.Module, inputs: Mapping[str, torch.Tensor], **kwargs) -> GradCheckReport:
    """Gradient-check ``module(**inputs)`` over the module's parameters and the inputs."""
    return check_gradients(module, inputs, list(module.named_parameters()), **kwargs)


def randomize_parameters(module: torch.nn.Module, seed: int, scale: float = 0.3) -> torch.nn.Module:
    """Perturb every parameter with Gaussian noise so identity initialisations don't hide gradients."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(scale * torch.randn(p.shape, dtype=p.dtype, generator=gen))
    return module
