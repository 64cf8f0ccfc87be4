"""Finite-difference verification suites: every tape operation gets checked
against 64-bit central differences, then the whole model/loss composition is
checked parameter by parameter."""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .data import generate_synthetic, collate
from .errors import ConfigError
from .losses import LossConfig, combined_loss
from .model import ModelConfig, copy_model, forward_from_tensors, init_model

DEFAULT_THRESHOLD = 1e-4
_EPS = 1e-5


@dataclass
class GroupResult:
    name: str
    max_rel_err: float
    n_checks: int

    def passed(self, threshold: float = DEFAULT_THRESHOLD) -> bool:
        return self.max_rel_err <= threshold


def _rng(name: str, seed: int, k: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([331019, seed, k, zlib.crc32(name.encode())]))


def _probe(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.normal(size=shape)


def _scalarized(op: Callable[[Tensor], Tensor], w: np.ndarray) -> Callable[[Tensor], Tensor]:
    """Reduce an array-valued op to a scalar with a fixed random probe so
    central differences see every output coordinate."""
    probe = Tensor(w)
    return lambda x: ad.sum_all(ad.mul(op(x), probe))


def _away_from_kink(x: np.ndarray, margin: float = 0.05) -> np.ndarray:
    return np.where(x >= 0, x + margin, x - margin)


def _op_suites(seed: int, draws: int) -> dict:
    """name -> callable returning (max_rel_err, n_checks)."""

    def suite(name: str, build):
        def run():
            worst = 0.0
            for k in range(draws):
                rng = _rng(name, seed, k)
                for f, x in build(rng):
                    worst = max(worst, grad_check(f, x, eps=_EPS))
            return worst, draws
        return run

    def simple(op, draw):
        # output shape equals a dry-run of the op on the drawn input
        def build(rng):
            x = draw(rng)
            out_shape = op(Tensor(x.copy())).shape
            w = _probe(rng, out_shape)
            return [(_scalarized(op, w), Tensor(x))]
        return build

    def normal(shape):
        return lambda rng: rng.normal(size=shape)

    suites = {}

    def matmul_build(rng):
        checks = []
        a = rng.normal(size=(4, 5))
        b = rng.normal(size=(5, 3))
        w = _probe(rng, (4, 3))
        checks.append((_scalarized(lambda t: ad.matmul(t, Tensor(b.copy())), w), Tensor(a)))
        checks.append((_scalarized(lambda t: ad.matmul(Tensor(a.copy()), t), w), Tensor(b)))
        ba = rng.normal(size=(2, 3, 4))
        bb = rng.normal(size=(2, 4, 2))
        wb = _probe(rng, (2, 3, 2))
        checks.append((_scalarized(lambda t: ad.matmul(t, Tensor(bb.copy())), wb), Tensor(ba)))
        checks.append((_scalarized(lambda t: ad.matmul(Tensor(ba.copy()), t), wb), Tensor(bb)))
        shared = rng.normal(size=(4, 3))
        ws = _probe(rng, (2, 3, 3))
        checks.append((_scalarized(lambda t: ad.matmul(t, Tensor(shared.copy())), ws), Tensor(ba)))
        checks.append((_scalarized(lambda t: ad.matmul(Tensor(ba.copy()), t), ws), Tensor(shared)))
        return checks
    suites["matmul"] = suite("matmul", matmul_build)

    def binary_build(op):
        def build(rng):
            x = rng.normal(size=(3, 4))
            y = rng.normal(size=(3, 4))
            w = _probe(rng, (3, 4))
            return [
                (_scalarized(lambda t: op(t, Tensor(y.copy())), w), Tensor(x)),
                (_scalarized(lambda t: op(Tensor(x.copy()), t), w), Tensor(y)),
            ]
        return build
    suites["add"] = suite("add", binary_build(ad.add))
    suites["sub"] = suite("sub", binary_build(ad.sub))
    suites["mul"] = suite("mul", binary_build(ad.mul))

    suites["scale"] = suite("scale", simple(lambda t: ad.scale(t, -1.7), normal((3, 4))))
    suites["div_scalar"] = suite("div_scalar", simple(lambda t: ad.div_scalar(t, 3.0), normal((3, 4))))
    suites["relu"] = suite("relu", simple(ad.relu, lambda rng: _away_from_kink(rng.normal(size=(4, 5)))))
    suites["gelu"] = suite("gelu", simple(ad.gelu, normal((4, 5))))
    suites["exp"] = suite("exp", simple(ad.exp, normal((3, 3))))
    suites["log"] = suite("log", simple(ad.log, lambda rng: rng.uniform(0.1, 2.0, size=(3, 4))))
    suites["softmax"] = suite("softmax", simple(lambda t: ad.softmax(t, axis=-1), normal((3, 6))))
    suites["log_softmax"] = suite("log_softmax", simple(lambda t: ad.log_softmax(t, axis=-1), normal((3, 6))))
    suites["sum_all"] = suite("sum_all", lambda rng: [(lambda t: ad.sum_all(t), Tensor(rng.normal(size=(3, 4))))])
    suites["mean_all"] = suite("mean_all", lambda rng: [(lambda t: ad.mean_all(t), Tensor(rng.normal(size=(3, 4))))])
    suites["transpose"] = suite("transpose", simple(lambda t: ad.transpose(t, (1, 0, 2)), normal((2, 3, 4))))
    suites["reshape"] = suite("reshape", simple(lambda t: ad.reshape(t, (6, 4)), normal((2, 3, 4))))
    suites["slice_rows"] = suite("slice_rows", simple(lambda t: ad.slice_rows(t, 1, 4), normal((5, 3))))
    suites["diag_part"] = suite("diag_part", simple(ad.diag_part, normal((4, 4))))

    def layer_norm_build(rng):
        x = rng.normal(size=(4, 6))
        g = rng.uniform(0.5, 1.5, size=6)
        b = rng.normal(size=6)
        w = _probe(rng, (4, 6))
        return [
            (_scalarized(lambda t: ad.layer_norm(t, Tensor(g.copy()), Tensor(b.copy())), w), Tensor(x)),
            (_scalarized(lambda t: ad.layer_norm(Tensor(x.copy()), t, Tensor(b.copy())), w), Tensor(g)),
            (_scalarized(lambda t: ad.layer_norm(Tensor(x.copy()), Tensor(g.copy()), t), w), Tensor(b)),
        ]
    suites["layer_norm"] = suite("layer_norm", layer_norm_build)

    def pool_build(rng):
        x = rng.normal(size=(3, 5, 4))
        mask = (rng.uniform(size=(3, 5)) < 0.7).astype(np.float64)
        mask[:, 0] = 1.0  # every row keeps at least one frame
        w = _probe(rng, (3, 4))
        return [(_scalarized(lambda t: ad.masked_mean_pool(t, mask), w), Tensor(x))]
    suites["masked_mean_pool"] = suite("masked_mean_pool", pool_build)

    def add_bias_build(rng):
        x = rng.normal(size=(3, 4, 5))
        b = rng.normal(size=5)
        w = _probe(rng, (3, 4, 5))
        return [
            (_scalarized(lambda t: ad.add_bias(t, Tensor(b.copy())), w), Tensor(x)),
            (_scalarized(lambda t: ad.add_bias(Tensor(x.copy()), t), w), Tensor(b)),
        ]
    suites["add_bias"] = suite("add_bias", add_bias_build)

    def add_col_build(rng):
        x = rng.normal(size=(4, 3))
        c = rng.normal(size=4)
        w = _probe(rng, (4, 3))
        return [
            (_scalarized(lambda t: ad.add_col(t, Tensor(c.copy())), w), Tensor(x)),
            (_scalarized(lambda t: ad.add_col(Tensor(x.copy()), t), w), Tensor(c)),
        ]
    suites["add_col"] = suite("add_col", add_col_build)

    def l2_build(rng):
        x = rng.normal(size=(4, 5))
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        x = np.where(norms < 0.5, x * (0.5 / np.maximum(norms, 1e-9)), x)
        w = _probe(rng, (4, 5))
        return [(_scalarized(ad.l2_normalize_rows, w), Tensor(x))]
    suites["l2_normalize_rows"] = suite("l2_normalize_rows", l2_build)

    return suites


def _model_fixture(seed: int):
    """Tiny 64-bit model plus one collated 4-pair batch."""
    ds = generate_synthetic(n_audio=4, captions_per_audio=1, d_audio=5,
                            d_text=4, t_range=(3, 5), noise_sigma=0.1, seed=seed)
    batch = collate(ds, [0, 1, 2, 3])
    cfg = ModelConfig(d_model=8, n_layers=2, d_audio_in=5, d_text_in=4,
                      n_heads=2, ffn_mult=2)
    model = copy_model(init_model(cfg, seed), dtype=np.float64)
    return model, batch


def run_model_suite(seed: int = 0) -> GroupResult:
    """Central differences through the full forward + combined loss, swapping
    one parameter tensor at a time. Tied parameters are stored once, so both
    modality contributions land in a single check.

    The denominator floor is 1e-6 here: attention key biases have exactly
    zero gradient (a constant shift of every key moves all logits of a query
    equally, which softmax cancels), and the difference quotient measures
    only rounding noise ~ulp(loss)/(2*eps) ~ 1e-11 on those coordinates."""
    model, batch = _model_fixture(seed)
    loss_cfg = LossConfig()
    fa = batch.audio_frames.astype(np.float64)
    ft = batch.text_frames.astype(np.float64)

    def loss_with(name: str, t: Tensor) -> Tensor:
        old = model.params[name]
        model.params[name] = t
        try:
            r_a, r_t, c_a, c_t = forward_from_tensors(
                model, Tensor(fa.copy()), batch.audio_mask,
                Tensor(ft.copy()), batch.text_mask)
            return combined_loss(r_a, r_t, c_a, c_t, model.logit_scale, loss_cfg)
        finally:
            model.params[name] = old

    worst = 0.0
    n = 0
    for name in model.params:
        err = grad_check(lambda t, _n=name: loss_with(_n, t),
                         Tensor(model.params[name].data.copy()), eps=_EPS,
                         floor=1e-6)
        worst = max(worst, err)
        n += 1
    return GroupResult("full_model_loss", worst, n)


def run_suites(seed: int = 0, only: Optional[list] = None,
               draws: int = 8) -> list:
    """All op groups plus the end-to-end model group, optionally filtered."""
    suites = _op_suites(seed, draws)
    names = list(suites) + ["full_model_loss"]
    if only:
        unknown = [n for n in only if n not in names]
        if unknown:
            raise ConfigError(f"unknown gradcheck group(s) {unknown}; "
                              f"available: {', '.join(names)}")
        names = [n for n in names if n in only]
    results = []
    for name in names:
        if name == "full_model_loss":
            results.append(run_model_suite(seed))
        else:
            err, n = suites[name]()
            results.append(GroupResult(name, err, n))
    return results


def format_report(results: list, threshold: float = DEFAULT_THRESHOLD,
                  elapsed: Optional[float] = None) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'group':<{width}}  {'checks':>6}  {'max rel err':>12}  status"]
    for r in results:
        status = "ok" if r.passed(threshold) else "FAIL"
        lines.append(f"{r.name:<{width}}  {r.n_checks:>6}  {r.max_rel_err:>12.3e}  {status}")
    overall = "ok" if all(r.passed(threshold) for r in results) else "FAIL"
    tail = f"overall: {overall} (threshold {threshold:g}"
    if elapsed is not None:
        tail += f", {elapsed:.1f}s"
    lines.append(tail + ")")
    return "\n".join(lines)


def run_and_report(seed: int = 0, only: Optional[list] = None, draws: int = 8,
                   threshold: float = DEFAULT_THRESHOLD) -> tuple:
    t0 = time.perf_counter()
    results = run_suites(seed=seed, only=only, draws=draws)
    elapsed = time.perf_counter() - t0
    passed = all(r.passed(threshold) for r in results)
    return results, passed, format_report(results, threshold, elapsed)
