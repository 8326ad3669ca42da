"""Finite-difference checks of every differentiable op and of a tiny denoiser."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from stage_world import htft
from stage_world import numerics as nx
from stage_world.denoiser import ConditionPack, Denoiser, UNetConfig, anchor_tokens_from_latent, weighted_loss
from stage_world.geometry import WeightMap

TOLERANCE = 1e-3
STEP = 1e-3

LossBuilder = Callable[[np.random.Generator], Tuple[Callable[[], nx.Tensor], nx.ParamStore]]


@dataclass(frozen=True)
class OpCheck:
    name: str
    build: LossBuilder
    max_elements: Optional[int] = None


@dataclass(frozen=True)
class OpResult:
    op: str
    max_rel_err: float
    worst_param: str
    passed: bool


@dataclass
class GradcheckReport:
    results: List[OpResult] = field(default_factory=list)
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return all(result.passed for result in self.results)

    def failures(self) -> List[str]:
        return [result.op for result in self.results if not result.passed]

    def to_dataframe(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {"op": r.op, "max_rel_err": r.max_rel_err, "worst_param": r.worst_param, "passed": r.passed}
                for r in self.results
            ],
            columns=["op", "max_rel_err", "worst_param", "passed"],
        )


def _store(rng: np.random.Generator, **shapes: Tuple[int, ...]) -> nx.ParamStore:
    store = nx.ParamStore()
    for name, shape in shapes.items():
        store.add(name, rng.normal(0.0, 1.0, shape))
    return store


def _projected(out: nx.Tensor, probe: np.ndarray) -> nx.Tensor:
    """sum(out * probe), a scalar whose gradient exercises every output entry."""
    return nx.sum_all(nx.mul(out, nx.Tensor(probe)))


def _unary(op: Callable[[nx.Tensor], nx.Tensor], shape: Tuple[int, ...]) -> LossBuilder:
    def build(rng: np.random.Generator):
        store = _store(rng, x=shape)
        probe = rng.normal(0.0, 1.0, op(store["x"]).shape)
        return (lambda: _projected(op(store["x"]), probe)), store

    return build


def _binary(op: Callable[[nx.Tensor, nx.Tensor], nx.Tensor], a_shape: Tuple[int, ...], b_shape: Tuple[int, ...]) -> LossBuilder:
    def build(rng: np.random.Generator):
        store = _store(rng, a=a_shape, b=b_shape)
        probe = rng.normal(0.0, 1.0, op(store["a"], store["b"]).shape)
        return (lambda: _projected(op(store["a"], store["b"]), probe)), store

    return build


def _linear(rng: np.random.Generator):
    store = _store(rng, x=(5, 4), w=(4, 3), b=(3,))
    probe = rng.normal(0.0, 1.0, (5, 3))
    return (lambda: _projected(nx.linear(store["x"], store["w"], store["b"]), probe)), store


def _channel_affine(rng: np.random.Generator):
    store = _store(rng, x=(4, 3, 3), w=(4,), b=(4,))
    probe = rng.normal(0.0, 1.0, (4, 3, 3))
    return (lambda: _projected(nx.channel_affine(store["x"], store["w"], store["b"]), probe)), store


def _group_norm(rng: np.random.Generator):
    store = _store(rng, x=(4, 3, 3), w=(4,), b=(4,))
    probe = rng.normal(0.0, 1.0, (4, 3, 3))
    return (lambda: _projected(nx.group_norm(store["x"], 2, weight=store["w"], bias=store["b"]), probe)), store


def _cross_attention(rng: np.random.Generator):
    store = _store(rng, q=(3, 4), kv=(5, 4), wq=(4, 4), wk=(4, 4), wv=(4, 4))
    probe = rng.normal(0.0, 1.0, (3, 4))

    def loss() -> nx.Tensor:
        out = nx.cross_attention(store["q"], store["kv"], store["wq"], store["wk"], store["wv"])
        return _projected(out, probe)

    return loss, store


def _dropout(rng: np.random.Generator):
    store = _store(rng, x=(4, 5))
    probe = rng.normal(0.0, 1.0, (4, 5))
    seed = int(rng.integers(0, 2**31 - 1))
    return (lambda: _projected(nx.dropout(store["x"], 0.3, nx.make_rng(seed, "dropout"), True), probe)), store


def _concat(rng: np.random.Generator):
    store = _store(rng, a=(2, 3, 3), b=(1, 3, 3))
    probe = rng.normal(0.0, 1.0, (3, 3, 3))
    return (lambda: _projected(nx.concat([store["a"], store["b"]], axis=0), probe)), store


def _weighted_mse(rng: np.random.Generator):
    store = _store(rng, x=(2, 4, 4))
    target = rng.normal(0.0, 1.0, (2, 4, 4))
    weight = rng.uniform(0.1, 2.0, (4, 4))
    return (lambda: nx.weighted_mse(store["x"], target, weight)), store


def tiny_unet_config() -> UNetConfig:
    return UNetConfig(
        latent_channels=1,
        latent_height=8,
        latent_width=8,
        base_channels=4,
        channel_mults=(1, 2),
        token_dim=8,
        embed_dim=8,
        groups=2,
        anchor_patch=4,
        fusion_sites=("mid", "up0"),
    )


def _denoiser(rng: np.random.Generator):
    """Full forward pass with populated buffers so every fusion block contributes."""
    config = tiny_unet_config()
    model = Denoiser.initialize(config, seed=int(rng.integers(0, 2**31 - 1)))
    for site in config.fusion_sites:
        name = f"htft.{site}.out.weight"
        model.params.assign(name, rng.normal(0.0, 0.3, model.params[name].shape))
    shape = config.latent_shape
    buffers = htft.make_buffers(config.fusion_sites, n_steps=1)
    for site in config.fusion_sites:
        tokens = rng.normal(0.0, 1.0, (6, config.site_channels(site)))
        buffers[site].push(htft.FeatureFrame(time_index=0, step_index=0, tokens=tokens))
    latent = rng.normal(0.0, 0.5, shape)
    cond = ConditionPack(
        cond_latent=rng.normal(0.0, 0.5, shape),
        anchor_tokens=anchor_tokens_from_latent(rng.normal(0.0, 0.5, shape).astype(np.float32), config.anchor_patch),
        raster=(rng.random((3, config.latent_height, config.latent_width)) < 0.2).astype(np.float32),
        weight_map=WeightMap(values=rng.uniform(0.5, 1.5, (config.latent_height, config.latent_width))),
    )
    x_t = latent + rng.normal(0.0, 1.0, shape)
    target = latent

    def loss() -> nx.Tensor:
        x0_hat, _ = model.forward(x_t, 1.0, cond, buffers=buffers, step_index=0, time_index=1)
        return weighted_loss(x0_hat, target, cond.weight_map)

    return loss, model.params


OP_CHECKS: Sequence[OpCheck] = (
    OpCheck("add", _binary(nx.add, (3, 4), (3, 4))),
    OpCheck("sub", _binary(nx.sub, (3, 4), (3, 4))),
    OpCheck("mul", _binary(nx.mul, (3, 4), (3, 4))),
    OpCheck("scale", _unary(lambda x: nx.scale(x, 0.7), (3, 4))),
    OpCheck("sum_all", _unary(nx.sum_all, (3, 4))),
    OpCheck("mean_all", _unary(nx.mean_all, (3, 4))),
    OpCheck("reshape", _unary(lambda x: nx.reshape(x, (4, 3)), (3, 4))),
    OpCheck("transpose", _unary(nx.transpose, (3, 4))),
    OpCheck("concat", _concat),
    OpCheck("silu", _unary(nx.silu, (3, 4))),
    OpCheck("dropout", _dropout),
    OpCheck("matmul", _binary(nx.matmul, (5, 4), (4, 3))),
    OpCheck("linear", _linear),
    OpCheck("add_channel", _binary(nx.add_channel, (3, 2, 2), (3,))),
    OpCheck("channel_affine", _channel_affine),
    OpCheck("conv2d", _binary(nx.conv2d, (2, 4, 4), (3, 2, 3, 3))),
    OpCheck("group_norm", _group_norm),
    OpCheck("softmax_rows", _unary(nx.softmax_rows, (3, 5))),
    OpCheck("cross_attention", _cross_attention),
    OpCheck("avg_pool", _unary(lambda x: nx.avg_pool(x, 2), (2, 4, 4))),
    OpCheck("upsample_nearest", _unary(lambda x: nx.upsample_nearest(x, 2), (2, 3, 3))),
    OpCheck("dct2", _unary(nx.dct2, (4, 5))),
    OpCheck("idct2", _unary(nx.idct2, (4, 5))),
    OpCheck("weighted_mse", _weighted_mse),
    OpCheck("denoiser", _denoiser, max_elements=3),
)


def check_op(check: OpCheck, seed: int = 0, tolerance: float = TOLERANCE, h: float = STEP) -> OpResult:
    rng = nx.make_rng(seed, "gradcheck", check.name)
    with nx.precision(np.float64):
        loss_fn, store = check.build(rng)
        errors: Dict[str, float] = nx.finite_difference_check(
            loss_fn, store, h=h, max_elements=check.max_elements, rng=rng
        )
    worst = max(errors, key=errors.get)
    return OpResult(op=check.name, max_rel_err=errors[worst], worst_param=worst, passed=errors[worst] < tolerance)


def run_gradchecks(
    checks: Sequence[OpCheck] = OP_CHECKS,
    seed: int = 0,
    tolerance: float = TOLERANCE,
    only: Optional[Sequence[str]] = None,
) -> GradcheckReport:
    report = GradcheckReport(tolerance=tolerance)
    for check in checks:
        if only and check.name not in only:
            continue
        report.results.append(check_op(check, seed, tolerance))
    return report
