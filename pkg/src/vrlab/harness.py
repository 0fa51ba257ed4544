"""Training protocols and RD experiments on the toy models.

Every run is a pure function of its ``TrainConfig``: training batches, the
noise of the rate proxy and the fixed evaluation set all come from
generators seeded off ``cfg.seed``.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import yaml

from . import gradcore as gc
from . import models as M
from .data import make_source
from .moo import SGD, Adam, DiagnosticsLog, GradientTracker, NonFiniteLossError, mgda_step, summed_loss_step

log = logging.getLogger(__name__)

STAGES = ("dedicated", "moo", "qr", "vrhp", "single")
DEFAULT_STEPS = {"dedicated": 3000, "moo": 1500, "qr": 600, "vrhp": 1000, "single": 3000}


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; carries the step and the layer if known."""

    def __init__(self, stage: str, step: int, detail: str):
        self.stage, self.step, self.detail = stage, step, detail
        super().__init__(f"{stage}: diverged at step {step}: {detail}")


@dataclass
class TrainConfig:
    family: str = "linear"
    dim: int = 16
    rho: float = 0.9
    n_rates: int = 8
    lam_max: float = 1000.0
    lambdas: list[float] | None = None
    lr: float = 3e-3
    batch: int = 128
    steps: dict = field(default_factory=dict)
    eval_every: int = 100
    eval_size: int = 8192
    patience: int = 5
    factor: float = 1.0 / 3.0
    min_lr: float = 1e-5
    optimizer: str = "adam"
    proxy_rate: str = "noise"
    proxy_distortion: str = "ste"
    trainable_delta: bool = False
    pca_init: bool = True
    calibration_size: int = 4096
    mgda_tol: float = 1e-8
    grad_tracking: float = 1.0
    preconditioned_mgda: bool = False
    slack: float = 0.01
    lr_scale: dict = field(default_factory=dict)
    stage_options: dict = field(default_factory=dict)
    seed: int = 0
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lambdas is None:
            self.lambdas = M.geometric_lambdas(self.n_rates, self.lam_max)
        self.lambdas = [float(v) for v in self.lambdas]
        if not self.lambdas:
            raise ValueError("need at least one lambda")
        if any(b <= a for a, b in zip(self.lambdas, self.lambdas[1:])):
            raise ValueError("lambdas must be strictly increasing")
        self.n_rates = len(self.lambdas)
        self.steps = {**DEFAULT_STEPS, **self.steps}
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        bad = [k for k, v in self.steps.items() if k not in STAGES or int(v) <= 0]
        if bad:
            raise ValueError(f"invalid step counts for {bad}")
        if min(self.batch, self.eval_every, self.eval_size, self.patience) < 1:
            raise ValueError("batch, eval_every, eval_size and patience must be positive")
        M.ProxyMode(self.proxy_rate, self.proxy_distortion)
        if self.slack < 0:
            raise ValueError("slack must be nonnegative")
        known = {f.name for f in dataclasses.fields(self)} - {"stage_options", "steps", "lambdas", "n_rates", "lam_max"}
        for stage, opts in self.stage_options.items():
            if stage not in STAGES:
                raise ValueError(f"stage_options: unknown stage {stage!r}")
            bad = set(opts) - known
            if bad:
                raise ValueError(f"stage_options.{stage}: cannot override {sorted(bad)}")

    def for_stage(self, stage: str) -> "TrainConfig":
        """This config with the stage's overrides applied."""
        opts = self.stage_options.get(stage, {})
        return dataclasses.replace(self, stage_options={}, **opts) if opts else self

    # config files ----------------------------------------------------------------
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path, overrides: Sequence[str] = ()) -> "TrainConfig":
        d = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(d, dict):
            raise ValueError(f"{path}: config must be a mapping")
        return cls.from_dict(apply_overrides(d, overrides))

    def model_config(self) -> M.ModelConfig:
        return M.ModelConfig(**{"family": self.family, "dim": self.dim, "latent": self.dim, "seed": self.seed,
                                **self.model})

    @property
    def proxy(self) -> M.ProxyMode:
        return M.ProxyMode(self.proxy_rate, self.proxy_distortion)

    def rate_points(self) -> list[M.RatePoint]:
        return M.rate_points(self.lambdas)


def apply_overrides(d: dict, overrides: Sequence[str]) -> dict:
    """Apply ``key.sub=value`` overrides (values parsed as YAML) to a nested dict copy."""
    out = json.loads(json.dumps(d))
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ValueError(f"override {item!r} is not key=value")
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ValueError(f"override {item!r} descends into a scalar")
        node[parts[-1]] = _scalar(yaml.safe_load(raw))
    return out


def _scalar(v):
    # YAML 1.1 reads exponent forms without a dot ("1e8") as strings
    if isinstance(v, str):
        try:
            return float(v)
        except ValueError:
            pass
    return v


# data -----------------------------------------------------------------------------

def eval_set(cfg: TrainConfig) -> np.ndarray:
    return make_source(cfg.family, cfg.dim, cfg.rho).sample(cfg.eval_size, np.random.default_rng([cfg.seed, 1]))


def _streams(cfg: TrainConfig, stage: str):
    tag = STAGES.index(stage) + 10
    return np.random.default_rng([cfg.seed, tag, 0]), np.random.default_rng([cfg.seed, tag, 1])


# evaluation --------------------------------------------------------------------------

@dataclass
class RDPoint:
    delta: float
    bits_latent: float
    bits_hyper: float
    mse: float
    dims: int
    lambdas: tuple[float, ...] = ()

    @property
    def bits_total(self) -> float:
        return self.bits_latent + self.bits_hyper

    @property
    def bpd(self) -> float:
        return self.bits_total / self.dims

    @property
    def psnr(self) -> float:
        return M.psnr(self.mse)

    def loss(self, lam: float) -> float:
        return self.bpd + lam * self.mse

    def row(self) -> dict:
        r = {"delta": self.delta, "bits_latent": self.bits_latent, "bits_hyper": self.bits_hyper,
             "bits_total": self.bits_total, "bpd": self.bpd, "mse": self.mse, "psnr": self.psnr}
        for i, lam in enumerate(self.lambdas):
            r[f"loss_lambda_{i + 1}"] = self.loss(lam)
        return r


def evaluate(model: M.CodecModel, x: np.ndarray, rates: Sequence[M.RatePoint], flags: M.Flags) -> np.ndarray:
    """Per-rate-point loss with hard rounding and model-estimated bits."""
    out = np.empty(len(rates))
    for j, rp in enumerate(rates):
        a = M.analyze(model, x, rp.delta, flags)
        out[j] = a.bits_est / x.size + rp.lam * a.mse
    return out


def rd_sweep(model: M.CodecModel, x: np.ndarray, deltas: Sequence[float], flags: M.Flags,
             lambdas: Sequence[float] = (), coded: bool = True) -> list[RDPoint]:
    """RD points at each step size; ``coded`` runs the range coder for actual bit counts."""
    pts = []
    for d in deltas:
        if coded:
            c = M.compress(model, x, d, flags)
            bl, bh, mse = c.metrics["bits_latent"], c.metrics["bits_hyper"], c.metrics["mse"]
        else:
            a = M.analyze(model, x, d, flags)
            bl, bh, mse = a.bits_latent_est, a.bits_hyper_est, a.mse
        pts.append(RDPoint(float(d), float(bl), float(bh), float(mse), int(x.size), tuple(lambdas)))
    return pts


def naive_delta_sweep(model: M.CodecModel, x: np.ndarray, deltas: Sequence[float],
                      lambdas: Sequence[float] = (), coded: bool = False) -> list[RDPoint]:
    """The highest-rate model at larger step sizes, with no retraining and no offsets."""
    return rd_sweep(model, x, deltas, M.Flags(), lambdas, coded=coded)


def write_rd_csv(path, points: Sequence[RDPoint]) -> None:
    rows = [p.row() for p in points]
    if not rows:
        raise ValueError("no RD points")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


# training loop ------------------------------------------------------------------------

@dataclass
class StageResult:
    model: M.CodecModel
    eval_losses: np.ndarray
    history: list[tuple[int, float, np.ndarray]]
    diagnostics: DiagnosticsLog


class _Plateau:
    """Divide the learning rate by 1/factor after ``patience`` evaluations without improvement."""

    def __init__(self, opt, factor: float, patience: int, min_lr: float):
        self.opt, self.factor, self.patience, self.min_lr = opt, factor, patience, min_lr
        self.best = math.inf
        self.bad = 0

    def step(self, value: float) -> bool:
        if value < self.best * (1 - 1e-4):
            self.best, self.bad = value, 0
            return True
        self.bad += 1
        if self.bad >= self.patience:
            self.opt.lr = max(self.min_lr, self.opt.lr * self.factor)
            self.bad = 0
        return False


def _optimizer(cfg: TrainConfig):
    scale = {k: float(v) for k, v in cfg.lr_scale.items()}
    return Adam(cfg.lr, lr_scale=scale) if cfg.optimizer == "adam" else SGD(cfg.lr, lr_scale=scale)


def _run(stage: str, model: M.CodecModel, cfg: TrainConfig, rates: Sequence[M.RatePoint], flags: M.Flags,
         method: str, steps: int, diag_path=None, progress: Callable[[str, int, np.ndarray], None] | None = None
         ) -> StageResult:
    """Shared loop: ``method`` is 'mgda' or 'sum'.

    Returns the final state when its per-point losses all stay within
    ``cfg.slack`` of the starting losses; otherwise the best-scoring
    evaluated state that does (the start itself always qualifies).
    """
    cfg = cfg.for_stage(stage)
    source = make_source(cfg.family, cfg.dim, cfg.rho)
    data_rng, noise_rng = _streams(cfg, stage)
    xe = eval_set(cfg)
    opt = _optimizer(cfg)
    sched = _Plateau(opt, cfg.factor, cfg.patience, cfg.min_lr)
    shared = model.params.shared()
    specific = [model.params.specific(rp.index) for rp in rates]
    diag = DiagnosticsLog(diag_path)
    proxy = cfg.proxy
    tracker = GradientTracker(cfg.grad_tracking) if cfg.grad_tracking < 1 else None

    def score(losses: np.ndarray) -> float:
        # losses span orders of magnitude across rates; compare relative progress
        return float(np.sum(losses / base))

    base = evaluate(model, xe, rates, flags)
    best_state, best_losses, best_score = model.params.state(), base, score(base)
    sched.step(best_score)
    history = [(0, opt.lr, base)]
    try:
        for step in range(1, steps + 1):
            x = source.sample(cfg.batch, data_rng)
            seed = noise_rng.integers(2 ** 63)

            def loss_fn(i: int) -> gc.Tensor:
                return M.forward_train(model, x, rates[i], flags, proxy,
                                       rng=np.random.default_rng([seed, i]))[2]

            if method == "mgda":
                mgda_step(shared, specific, loss_fn, opt, step, cfg.mgda_tol, diag, tracker=tracker,
                           preconditioned=cfg.preconditioned_mgda)
            else:
                summed_loss_step(shared, specific, loss_fn, opt, step, diag)
            if step % cfg.eval_every == 0 or step == steps:
                losses = evaluate(model, xe, rates, flags)
                if not np.isfinite(losses).all():
                    raise DivergenceError(stage, step, "non-finite evaluation loss")
                sched.step(score(losses))
                feasible = bool(np.all(losses <= base * (1 + cfg.slack)))
                if feasible and (step == steps or score(losses) < best_score):
                    best_state, best_losses, best_score = model.params.state(), losses, score(losses)
                history.append((step, opt.lr, losses))
                if progress:
                    progress(stage, step, losses)
    except (NonFiniteLossError, M.NonFiniteActivation, FloatingPointError) as exc:
        raise DivergenceError(stage, step, str(exc)) from exc
    finally:
        diag.close()
    model.params.load_state(best_state)
    return StageResult(model, best_losses, history, diag)


def _prepare(init: M.CodecModel, cfg: TrainConfig, trainable: Sequence[str] | None) -> M.CodecModel:
    model = init.copy()
    model.set_rates(cfg.rate_points(), trainable_delta=cfg.trainable_delta)
    model.params.set_trainable(None, False)
    model.params.set_trainable(trainable, True)
    if cfg.trainable_delta:
        model.params.set_trainable(["delta"], True)
    return model


def calibration_set(cfg: TrainConfig) -> np.ndarray:
    return make_source(cfg.family, cfg.dim, cfg.rho).sample(cfg.calibration_size, np.random.default_rng([cfg.seed, 2]))


def new_model(cfg: TrainConfig, lam: float | None = None) -> M.CodecModel:
    lam = cfg.lambdas[-1] if lam is None else lam
    mc = cfg.model_config()
    if "init_gain" not in cfg.model:
        mc = dataclasses.replace(mc, init_gain=M.high_rate_gain(lam))
    model = M.CodecModel(mc, [lam])
    if cfg.pca_init and cfg.family == "linear":
        model.init_basis(calibration_set(cfg))
    return model


def train_dedicated(cfg: TrainConfig, lam: float, diag_path=None, progress=None) -> StageResult:
    """Single-rate model at step size 1 for one lambda."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    model = new_model(cfg, lam)
    model.params.set_trainable(["offset_net", "deltaz_net", "delta"], False)
    rp = model.rates[0]
    return _run("dedicated", model, cfg, [rp], M.Flags(), "sum", int(cfg.steps["dedicated"]), diag_path, progress)


THETA_GROUPS = ("g_a", "g_s", "h_a", "h_s", "factorized")


def stage1_moo(cfg: TrainConfig, init: M.CodecModel, diag_path=None, progress=None) -> StageResult:
    model = _prepare(init, cfg, THETA_GROUPS)
    return _run("moo", model, cfg, model.rates, M.Flags(), "mgda", int(cfg.steps["moo"]), diag_path, progress)


def stage2_qr(cfg: TrainConfig, init: M.CodecModel, diag_path=None, progress=None) -> StageResult:
    model = _prepare(init, cfg, ["offset_net"])
    model.params.set_trainable(["delta"], False)
    return _run("qr", model, cfg, model.rates, M.Flags(qr_offsets=True), "sum", int(cfg.steps["qr"]),
                diag_path, progress)


def stage3_vrhp(cfg: TrainConfig, init: M.CodecModel, diag_path=None, progress=None) -> StageResult:
    model = _prepare(init, cfg, None)
    return _run("vrhp", model, cfg, model.rates, M.Flags(True, True), "mgda", int(cfg.steps["vrhp"]),
                diag_path, progress)


def single_stage(cfg: TrainConfig, init: M.CodecModel, flags: M.Flags = M.Flags(True, True), diag_path=None,
                 progress=None) -> StageResult:
    groups = list(THETA_GROUPS)
    if flags.qr_offsets:
        groups.append("offset_net")
    if flags.vr_hyper:
        groups.append("deltaz_net")
    model = _prepare(init, cfg, groups)
    return _run("single", model, cfg, model.rates, flags, "mgda", int(cfg.steps["single"]), diag_path, progress)


STAGE_FLAGS = {"dedicated": M.Flags(), "moo": M.Flags(), "qr": M.Flags(True, False),
               "vrhp": M.Flags(True, True), "single": M.Flags(True, True)}


# checkpoints ------------------------------------------------------------------------------

def save_model(model: M.CodecModel, path, flags: M.Flags = M.Flags()) -> None:
    """Parameters via the gradcore container plus a YAML sidecar with the model setup.

    ``flags`` records which coding tools the checkpoint was trained with, so
    sweeps and the codec default to them.
    """
    path = Path(path)
    gc.save_params(path, model.params.state())
    meta = {"model": dataclasses.asdict(model.config),
            "rates": [[rp.index, rp.lam, rp.delta] for rp in model.rates],
            "flags": dataclasses.asdict(flags)}
    path.with_suffix(".yaml").write_text(yaml.safe_dump(meta, sort_keys=True))


def load_model(path) -> M.CodecModel:
    path = Path(path)
    meta = yaml.safe_load(path.with_suffix(".yaml").read_text())
    model = M.CodecModel(M.ModelConfig(**meta["model"]))
    model.set_rates([M.RatePoint(int(i), float(lam), float(d)) for i, lam, d in meta["rates"]])
    model.params.load_state(gc.load_params(path))
    return model


def load_flags(path) -> M.Flags:
    meta = yaml.safe_load(Path(path).with_suffix(".yaml").read_text())
    return M.Flags(**meta.get("flags", {}))


# full experiment ------------------------------------------------------------------------------

def _dedicated_job(cfg_dict: dict, index: int, diag_path) -> tuple[dict, float]:
    cfg = TrainConfig.from_dict(cfg_dict)
    res = train_dedicated(cfg, cfg.lambdas[index], diag_path)
    return res.model.params.state(), float(res.eval_losses[0])


@dataclass
class PipelineResult:
    """Per-rate-point losses of every model in the comparison, on the shared evaluation set."""

    lambdas: list[float]
    deltas: list[float]
    losses: dict[str, np.ndarray]
    models: dict[str, M.CodecModel]
    seconds: dict[str, float] = field(default_factory=dict)

    def gap(self, key: str) -> np.ndarray:
        """Relative loss excess of ``key`` over the dedicated models."""
        return self.losses[key] / self.losses["dedicated"] - 1.0

    def rows(self) -> list[dict]:
        out = []
        for j, (lam, d) in enumerate(zip(self.lambdas, self.deltas)):
            r = {"index": j + 1, "lambda": lam, "delta": d}
            r.update({k: float(v[j]) for k, v in self.losses.items()})
            out.append(r)
        return out


def run_pipeline(cfg: TrainConfig, out_dir=None, workers: int = 1, single: bool = True,
                 progress=None) -> PipelineResult:
    """Dedicated baselines, naive sweep, the three-stage model and (optionally) the single-stage model.

    With ``out_dir`` every checkpoint, diagnostics log and RD sweep is written
    there, plus ``summary.csv`` with one row per rate point.
    """
    out = Path(out_dir) if out_dir is not None else None
    path = (lambda name: out / name) if out is not None else (lambda name: None)
    rates = cfg.rate_points()
    n = len(rates)
    seconds = {}
    clock = time.perf_counter()

    def lap(name):
        nonlocal clock
        now = time.perf_counter()
        seconds[name] = now - clock
        clock = now

    diag = [path(f"diagnostics_dedicated_{i + 1}.csv") for i in range(n)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            jobs = [pool.submit(_dedicated_job, cfg.to_dict(), i, diag[i]) for i in range(n)]
            done = [j.result() for j in jobs]
    else:
        done = [_dedicated_job(cfg.to_dict(), i, diag[i]) for i in range(n)]
    dedicated = []
    for i, (state, _) in enumerate(done):
        m = new_model(cfg, cfg.lambdas[i])
        m.params.load_state(state)
        dedicated.append(m)
        if out is not None:
            save_model(m, path(f"dedicated_{i + 1}.vrp"))
    losses = {"dedicated": np.array([v for _, v in done])}
    lap("dedicated")
    xe = eval_set(cfg)
    top = dedicated[-1]
    losses["naive"] = evaluate(top, xe, rates, M.Flags())
    models = {"dedicated": top}

    stages = [("moo", stage1_moo), ("qr", stage2_qr), ("vrhp", stage3_vrhp)]
    prev = top
    for name, fn in stages:
        res = fn(cfg, prev, path(f"diagnostics_{name}.csv"), progress)
        prev = models[name] = res.model
        losses[name] = res.eval_losses
        lap(name)
    if single:
        res = single_stage(cfg, top, M.Flags(True, True), path("diagnostics_single.csv"), progress)
        models["single"] = res.model
        losses["single"] = res.eval_losses
        lap("single")

    result = PipelineResult(list(cfg.lambdas), [rp.delta for rp in rates], losses, models, seconds)
    if out is not None:
        deltas = [rp.delta for rp in rates]
        write_rd_csv(path("rd_naive.csv"), naive_delta_sweep(top, xe, deltas, cfg.lambdas, coded=True))
        for name, m in models.items():
            if name == "dedicated":
                continue
            save_model(m, path(f"{name}.vrp"), STAGE_FLAGS[name])
            write_rd_csv(path(f"rd_{name}.csv"), rd_sweep(m, xe, deltas, STAGE_FLAGS[name], cfg.lambdas))
        rows = result.rows()
        with open(path("summary.csv"), "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return result
