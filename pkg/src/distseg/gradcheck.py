"""Finite-difference verification of the full backward pass.

Builds a miniature two-stage network at 64-bit precision, attaches the
uncertainty-weighted two-task loss, and compares every analytic parameter
gradient (including both task log-variances) against central differences.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .losses import LossConfig, TaskWeights, nll_pixelwise, nll_pixelwise_grad, total_loss, total_loss_grads
from .model import S_DIST, S_SEG, CascadeNet, NetworkConfig

__all__ = ["GradCheckReport", "MINIATURE", "gradcheck"]

MINIATURE = NetworkConfig(
    stages=2,
    channels_per_stage=(4, 6),
    convs_per_stage=(1, 1),
    num_distance_classes=6,
    dtype="float64",
)


@dataclass
class GradCheckReport:
    tolerance: float
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values())

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance

    def lines(self):
        width = max(len(n) for n in self.per_param)
        for name, err in self.per_param.items():
            flag = "ok" if err <= self.tolerance else "FAIL"
            yield f"{name:<{width}}  max rel err {err:.3e}  {flag}"
        yield f"overall max rel err {self.max_rel_err:.3e} (tolerance {self.tolerance:.0e})"


def _model_loss(model: CascadeNet, batch, seg_targets, dist_targets, cfg: LossConfig):
    out = model.forward(batch, want_cache=False)
    seg_nll = nll_pixelwise(out.seg_logits, seg_targets)
    dist_nll = nll_pixelwise(out.dist_logits, dist_targets)
    weights = TaskWeights(model.s_seg, model.s_dist)
    return total_loss(seg_nll, dist_nll, weights, cfg)[0]


def gradcheck(
    seed: int = 0,
    tolerance: float = 1e-4,
    spatial: int = 8,
    config: NetworkConfig = MINIATURE,
    corrupt: str | None = None,
    step: float = 1e-5,
    max_elements_per_param: int | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    Relative error per element is |a - n| / max(|a|, |n|, 0.01); the 0.01
    floor keeps finite-difference noise on near-zero gradients from
    registering as error. ``corrupt`` names a parameter whose analytic
    gradient gets an injected offset (negative-control hook).
    """
    rng = np.random.default_rng(seed)
    model = CascadeNet(config, seed=seed)
    model.params[S_SEG][...] = 0.3
    model.params[S_DIST][...] = -0.2
    batch = rng.standard_normal((1, config.input_channels, spatial, spatial))
    seg_targets = rng.integers(0, config.num_seg_classes, size=(1, spatial, spatial))
    dist_targets = rng.integers(0, config.num_distance_classes, size=(1, spatial, spatial))
    cfg = LossConfig(mode="multitask_uncertainty")

    out = model.forward(batch)
    seg_nll = nll_pixelwise(out.seg_logits, seg_targets)
    dist_nll = nll_pixelwise(out.dist_logits, dist_targets)
    weights = TaskWeights(model.s_seg, model.s_dist)
    d_seg, d_dist, ds_seg, ds_dist = total_loss_grads(seg_nll, dist_nll, weights, cfg)
    model.zero_grads()
    model.backward(
        out,
        d_dist * nll_pixelwise_grad(out.dist_logits, dist_targets),
        d_seg * nll_pixelwise_grad(out.seg_logits, seg_targets),
    )
    model.grads[S_SEG][...] = ds_seg
    model.grads[S_DIST][...] = ds_dist
    if corrupt is not None:
        model.grads[corrupt].reshape(-1)[0] += 0.01

    report = GradCheckReport(tolerance=tolerance)
    for name, param in model.params.items():
        analytic = model.grads[name].reshape(-1)
        flat = param.reshape(-1)
        n_elements = flat.size
        picks = range(n_elements)
        if max_elements_per_param is not None and n_elements > max_elements_per_param:
            picks = rng.choice(n_elements, size=max_elements_per_param, replace=False)
        worst = 0.0
        for idx in picks:
            orig = flat[idx]
            h = step * max(1.0, abs(orig))
            flat[idx] = orig + h
            lp = _model_loss(model, batch, seg_targets, dist_targets, cfg)
            flat[idx] = orig - h
            lm = _model_loss(model, batch, seg_targets, dist_targets, cfg)
            flat[idx] = orig
            numeric = (lp - lm) / (2 * h)
            err = abs(analytic[idx] - numeric) / max(abs(analytic[idx]), abs(numeric), 0.01)
            worst = max(worst, err)
        report.per_param[name] = worst
    return report
