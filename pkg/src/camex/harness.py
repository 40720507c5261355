"""Synthetic tasks, the toy SMoE model, training, evaluation and sweeps."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .curvature import CurvatureBank, init_curvature_bank
from .merging import prepare_deltas, weighted_sum
from .moe import Expert, ExpertBank, Router, expert_forward, init_expert, init_router, smoe_forward
from .segments import plan_segments, segment_scores, sequence_scores
from .tensor import NumericError, Tensor

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


# ------------------------------------------------------------------- data
@dataclass
class SyntheticTask:
    kind: str = "markov_lm"
    vocab: int = 16
    regimes: int = 2
    seq_len: int = 64
    segment_len: int = 16
    switch_prob: float = 0.5
    concentration: float = 0.1
    seed: int = 0
    transitions: np.ndarray | None = None  # [regimes, V, V] rows sum to 1

    def __post_init__(self):
        if self.kind not in ("markov_lm", "clustered"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.seq_len % self.segment_len:
            raise ValueError("segment_len must divide seq_len")
        if self.transitions is None:
            rng = np.random.default_rng([self.seed, 0xDA7A])
            alpha = np.full(self.vocab, self.concentration)
            self.transitions = rng.dirichlet(alpha, size=(self.regimes, self.vocab))
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        validate_stochastic(self.transitions)
        self.regimes, self.vocab = self.transitions.shape[0], self.transitions.shape[1]

    @classmethod
    def from_config(cls, cfg: TrainConfig, seed: int | None = None) -> "SyntheticTask":
        return cls(kind=cfg.task, vocab=cfg.vocab, regimes=cfg.regimes, seq_len=cfg.seq_len,
                   segment_len=cfg.segment_len, switch_prob=cfg.switch_prob,
                   concentration=cfg.concentration, seed=cfg.seed if seed is None else seed)


def validate_stochastic(p: np.ndarray) -> None:
    if p.ndim != 3 or p.shape[1] != p.shape[2]:
        raise ValueError(f"transitions must be [regimes, V, V], got {p.shape}")
    if (p < 0).any() or not np.all(np.abs(p.sum(axis=-1) - 1.0) <= 1e-12):
        raise ValueError("transition rows must be nonnegative and sum to 1")


@dataclass
class Dataset:
    inputs: np.ndarray  # [n, L] int
    targets: np.ndarray  # [n, L] next tokens (LM) or [n] labels
    regimes: np.ndarray  # [n, L] regime of each target position (LM) or [n]
    kind: str

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.targets[idx], self.regimes[idx], self.kind)


def gen_task(task: SyntheticTask, n: int, stream: int = 0) -> Dataset:
    """Sample ``n`` sequences; ``stream`` separates train / eval draws of one task."""
    rng = np.random.default_rng([task.seed, stream, n])
    L, S, V = task.seq_len, task.segment_len, task.vocab
    K = L // S
    if task.kind == "clustered":
        labels = rng.integers(task.regimes, size=n)
        # each class owns a token distribution: row 0 of its transition matrix
        dist = task.transitions[:, 0, :]
        u = rng.random((n, L))
        cdf = np.cumsum(dist[labels], axis=-1)
        tokens = (u[..., None] > cdf[:, None, :]).sum(-1).clip(max=V - 1)
        return Dataset(tokens.astype(np.int64), labels.astype(np.int64), labels.astype(np.int64), task.kind)

    seg_regime = np.empty((n, K), dtype=np.int64)
    seg_regime[:, 0] = rng.integers(task.regimes, size=n)
    for k in range(1, K):
        switch = rng.random(n) < task.switch_prob
        if task.regimes > 1:
            other = (seg_regime[:, k - 1] + rng.integers(1, task.regimes, size=n)) % task.regimes
        else:
            other = seg_regime[:, k - 1]
        seg_regime[:, k] = np.where(switch, other, seg_regime[:, k - 1])
    pos_regime = np.repeat(seg_regime, S, axis=1)  # regime generating target position t
    seq = np.empty((n, L + 1), dtype=np.int64)
    seq[:, 0] = rng.integers(V, size=n)
    cdfs = np.cumsum(task.transitions, axis=-1)
    for t in range(L):
        rows = cdfs[pos_regime[:, t], seq[:, t]]  # [n, V]
        seq[:, t + 1] = (rng.random((n, 1)) > rows).sum(-1).clip(max=V - 1)
    return Dataset(seq[:, :L].copy(), seq[:, 1:].copy(), pos_regime, task.kind)


def oracle_perplexity(task: SyntheticTask, data: Dataset) -> float:
    """Perplexity of the true generating process (knows the regimes)."""
    p = task.transitions[data.regimes, data.inputs, data.targets]
    return float(np.exp(-np.mean(np.log(p))))


# ------------------------------------------------------------------ model
@dataclass
class Layer:
    router: Router
    base: Expert | None  # None in the dynamic variant (global base lives on the model)
    domain: Expert  # stacked: N - 1 (merging) or N (smoe)
    curvature: CurvatureBank | None


@dataclass
class Model:
    cfg: TrainConfig
    embed: Tensor  # [V, d]
    layers: list[Layer]
    shared_base: Expert | None = None
    head: Tensor | None = None  # [classes, d] for classification

    # ---- parameters
    def named_parameters(self) -> dict[str, Tensor]:
        out = {"embed": self.embed}
        if self.head is not None:
            out["head"] = self.head
        if self.shared_base is not None:
            for n, t in self.shared_base.params().items():
                out[f"base.{n}"] = t
        seen: set[int] = set()
        for l, layer in enumerate(self.layers):
            out[f"layer.{l}.router.W_g"] = layer.router.W_g
            if layer.base is not None:
                for n, t in layer.base.params().items():
                    out[f"layer.{l}.base.{n}"] = t
            for n, t in layer.domain.params().items():
                out[f"layer.{l}.experts.{n}"] = t
            if layer.curvature is not None:
                for pn, f in layer.curvature.items():
                    for fn, t in f.factors().items():
                        if id(t) in seen:
                            continue
                        seen.add(id(t))
                        out[f"layer.{l}.curv.{pn}.{fn}"] = t
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def bank(self, layer: int) -> ExpertBank:
        lay = self.layers[layer]
        if lay.base is None:
            raise ValueError("dynamic layers have no stored base; use merged bases from forward")
        return ExpertBank(lay.base, lay.domain)

    # ---- forward
    def hidden(self, tokens: np.ndarray, step: int = 0) -> Tensor:
        cfg = self.cfg
        h = T.take(self.embed, tokens, axis=0)  # [B, L, d]
        base = self.shared_base
        for l, layer in enumerate(self.layers):
            if cfg.variant == "smoe":
                h = h + smoe_forward(layer.domain, layer.router, h, cfg.top_k)
                continue
            if cfg.variant == "merge":
                base = layer.base
            y, base_next = self._merge_block(layer, base, h, l, step)
            h = h + y
            base = base_next
        return h

    def _merge_block(self, layer: Layer, base: Expert, h: Tensor, l: int, step: int):
        cfg = self.cfg
        spec = cfg.merge
        B, L, d = h.shape
        taus = {n: layer.domain.params()[n] - t for n, t in base.params().items()}
        curv = layer.curvature if cfg.uses_curvature else None
        deltas, signs = prepare_deltas(taus, spec, curv, layer=l, step=step)
        if cfg.granularity == "segment":
            plan = plan_segments(L, cfg.segment_len)
            scores = segment_scores(layer.router, h, plan).scores  # [B, K, n]
            groups, glen = B * plan.K, plan.S
        else:
            scores = sequence_scores(layer.router, h)  # [B, n]
            groups, glen = B, L
        n = scores.shape[-1]
        flat_scores = scores.reshape(groups, n)

        def merged_param(name, t):
            upd = weighted_sum(deltas[name], flat_scores) * float(spec.alpha)
            if spec.protocol == "ties" and spec.ties_sign_multiplier:
                upd = upd * signs[name]
            return t + upd

        merged = base.map(merged_param)
        y = expert_forward(merged, h.reshape(groups, glen, d)).reshape(B, L, d)
        base_next = None
        if cfg.variant == "dynamic":
            uniform = np.full(n, 1.0 / n)
            base_next = base.map(lambda name, t: t + weighted_sum(deltas[name], uniform) * float(spec.alpha))
        return y, base_next

    def logits(self, tokens: np.ndarray, step: int = 0) -> Tensor:
        h = self.hidden(tokens, step)
        if self.cfg.task == "clustered":
            return h.mean(axis=1) @ self.head.T  # [B, C]
        return h @ self.embed.T  # [B, L, V]

    def loss(self, tokens: np.ndarray, targets: np.ndarray, step: int = 0) -> Tensor:
        """Mean negative log-likelihood of the targets."""
        logp = T.log_softmax(self.logits(tokens, step), axis=-1)
        picked = T.take_along(logp, np.asarray(targets)[..., None], axis=-1)
        return picked.mean() * -1.0


def build_model(cfg: TrainConfig, seed: int | None = None) -> Model:
    rng = np.random.default_rng([cfg.seed if seed is None else seed, 0x30DE1])
    d, dff, N = cfg.d_model, cfg.d_ff, cfg.n_experts
    embed = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), (cfg.vocab, d)), requires_grad=True)
    head = None
    if cfg.task == "clustered":
        head = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), (cfg.regimes, d)), requires_grad=True)
    shapes = {"W1": (dff, d), "b1": (dff,), "W2": (d, dff), "b2": (d,)}
    layers = []
    shared_base = None
    shared_curv = None
    if cfg.variant == "dynamic":
        shared_base = init_expert(rng, d, dff, activation=cfg.activation)
    for _ in range(cfg.layers):
        if cfg.variant == "smoe":
            layers.append(Layer(init_router(rng, N, d), None,
                                init_expert(rng, d, dff, lead=(N,), activation=cfg.activation), None))
            continue
        router = init_router(rng, N - 1, d)
        base = init_expert(rng, d, dff, activation=cfg.activation) if cfg.variant == "merge" else None
        domain = init_expert(rng, d, dff, lead=(N - 1,), activation=cfg.activation)
        curv = None
        if cfg.uses_curvature:
            if cfg.share_curvature and shared_curv is not None:
                curv = shared_curv
            else:
                curv = init_curvature_bank(shapes, N - 1, cfg.kronecker_rank)
                shared_curv = curv
        layers.append(Layer(router, base, domain, curv))
    return Model(cfg, embed, layers, shared_base, head)


# --------------------------------------------------------------- counting
@dataclass
class ParamCounts:
    backbone: int
    experts: int
    curvature: int
    router: int

    @property
    def total(self) -> int:
        return self.backbone + self.experts + self.curvature + self.router

    def as_dict(self) -> dict[str, int]:
        return {"backbone": self.backbone, "experts": self.experts, "curvature": self.curvature,
                "router": self.router, "total": self.total}


def count_params(model: Model) -> ParamCounts:
    counts = dict(backbone=0, experts=0, curvature=0, router=0)
    for name, t in model.named_parameters().items():
        if name in ("embed", "head"):
            key = "backbone"
        elif ".curv." in name:
            key = "curvature"
        elif name.endswith("router.W_g"):
            key = "router"
        else:
            key = "experts"
        counts[key] += t.size
    return ParamCounts(**counts)


def expert_param_count(cfg: TrainConfig) -> int:
    return 2 * cfg.d_model * cfg.d_ff + cfg.d_ff + cfg.d_model


def expected_param_counts(cfg: TrainConfig) -> ParamCounts:
    """Closed-form parameter counts for a configuration."""
    from .curvature import DimFactorization

    d, dff, N, L = cfg.d_model, cfg.d_ff, cfg.n_experts, cfg.layers
    backbone = cfg.vocab * d + (cfg.regimes * d if cfg.task == "clustered" else 0)
    one = expert_param_count(cfg)
    if cfg.variant == "smoe":
        return ParamCounts(backbone, L * N * one, 0, L * N * d)
    experts = L * N * one if cfg.variant == "merge" else 1 * one + L * (N - 1) * one
    curvature = 0
    if cfg.uses_curvature:
        shapes = [(dff, d), (dff,), (d, dff), (d,)]
        per_layer = cfg.kronecker_rank * (N - 1) * sum(
            DimFactorization.for_shape(s).factor_params() for s in shapes)
        curvature = per_layer * (1 if cfg.share_curvature else L)
    return ParamCounts(backbone, experts, curvature, L * (N - 1) * d)


# -------------------------------------------------------------- optimiser
class AdamW:
    """Adam with decoupled weight decay and a warm-up + linear-decay schedule."""

    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.98), eps: float = 1e-6,
                 weight_decay: float = 0.01, warmup_steps: int = 16, total_steps: int = 1):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.total_steps = max(total_steps, 1)
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def lr_at(self, step: int) -> float:
        """Learning rate for 0-based ``step``."""
        if self.warmup_steps and step < self.warmup_steps:
            return self.lr * (step + 1) / self.warmup_steps
        span = max(self.total_steps - self.warmup_steps, 1)
        return self.lr * max(0.0, (self.total_steps - step) / span)

    def step(self) -> float:
        lr = self.lr_at(self.t)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if lr == 0.0:
                continue
            p.data -= lr * self.weight_decay * p.data
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return lr


# ---------------------------------------------------------------- metrics
@dataclass
class MetricsLog:
    seed: int
    config_hash: str
    metric_name: str
    rows: list[dict] = field(default_factory=list)
    wall_time: float = 0.0
    param_count: int = 0
    final_metric: float = float("nan")
    initial_metric: float = float("nan")

    CSV_COLUMNS = ("step", "epoch", "loss", "metric", "seed", "config_hash")

    def log_step(self, step: int, epoch: int, loss: float, metric: float | None = None) -> None:
        if self.rows and step <= self.rows[-1]["step"]:
            raise ValueError("step indices must increase")
        self.rows.append({"step": step, "epoch": epoch, "loss": loss,
                          "metric": "" if metric is None else metric,
                          "seed": self.seed, "config_hash": self.config_hash})

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()

    def summary(self) -> dict:
        return {"seed": self.seed, "config_hash": self.config_hash, "metric": self.metric_name,
                "initial_metric": self.initial_metric, "final_metric": self.final_metric,
                "steps": len(self.rows), "wall_time": self.wall_time, "param_count": self.param_count}

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)


# ------------------------------------------------------------ train / eval
def evaluate(model: Model, data: Dataset, batch_size: int = 64) -> float:
    """Perplexity (LM) or accuracy (classification) over ``data``."""
    if len(data) == 0:
        raise ValueError("evaluate: empty dataset")
    if data.kind == "clustered":
        correct = 0
        for i in range(0, len(data), batch_size):
            lg = model.logits(data.inputs[i:i + batch_size]).data
            correct += int((lg.argmax(-1) == data.targets[i:i + batch_size]).sum())
        return correct / len(data)
    total, count = 0.0, 0
    for i in range(0, len(data), batch_size):
        tgt = data.targets[i:i + batch_size]
        nll = model.loss(data.inputs[i:i + batch_size], tgt).item()
        total += nll * tgt.size
        count += tgt.size
    return float(math.exp(total / count))


def total_steps(cfg: TrainConfig) -> int:
    return cfg.steps if cfg.steps > 0 else cfg.epochs * max(cfg.n_train // cfg.batch_size, 1)


def train(model: Model, data: Dataset, cfg: TrainConfig, eval_data: Dataset | None = None,
          log_every: int = 0) -> MetricsLog:
    """AdamW training; one row per step, metric filled at every epoch end."""
    try:
        return _train(model, data, cfg, eval_data, log_every)
    except NumericError as exc:
        raise TrainingDivergedError(f"non-finite activations: {exc}") from exc


def _train(model: Model, data: Dataset, cfg: TrainConfig, eval_data: Dataset | None, log_every: int) -> MetricsLog:
    t0 = time.perf_counter()
    steps = total_steps(cfg)
    params = model.parameters()
    opt = AdamW(params, cfg.lr, (cfg.beta1, cfg.beta2), cfg.eps, cfg.weight_decay,
                cfg.warmup_steps, steps)
    metrics = MetricsLog(cfg.seed, cfg.fingerprint(),
                         "accuracy" if cfg.task == "clustered" else "perplexity")
    metrics.param_count = count_params(model).total
    eval_data = eval_data if eval_data is not None else data
    metrics.initial_metric = evaluate(model, eval_data)
    rng = np.random.default_rng([cfg.seed, 0xBA7C])
    per_epoch = max(len(data) // cfg.batch_size, 1)
    order = rng.permutation(len(data))
    for step in range(steps):
        epoch, pos = divmod(step, per_epoch)
        if pos == 0 and step:
            order = rng.permutation(len(data))
        idx = order[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]
        model.zero_grad()
        loss = model.loss(data.inputs[idx], data.targets[idx], step=step)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDivergedError(f"non-finite loss {value} at step {step}")
        loss.backward()
        opt.step()
        metric = None
        if pos == per_epoch - 1 or step == steps - 1:
            metric = evaluate(model, eval_data)
        metrics.log_step(step, epoch, value, metric)
        if log_every and step % log_every == 0:
            log.info("step %d loss %.4f", step, value)
    metrics.final_metric = evaluate(model, eval_data)
    metrics.wall_time = time.perf_counter() - t0
    return metrics


def run(cfg: TrainConfig) -> tuple[Model, MetricsLog]:
    """Generate data, build, train and evaluate one configuration."""
    task = SyntheticTask.from_config(cfg, seed=0)
    train_data = gen_task(task, cfg.n_train, stream=1)
    eval_data = gen_task(task, cfg.n_eval, stream=2)
    model = build_model(cfg)
    return model, train(model, train_data, cfg, eval_data)


# ------------------------------------------------------------------ sweeps
GRID_KEYS = {"alpha": "alpha", "rank": "kronecker_rank", "experts": "n_experts"}


def parse_grid(spec: str) -> tuple[str, list]:
    """``"alpha=0.5,0.8,1.0"`` -> ("alpha", [0.5, 0.8, 1.0])."""
    if "=" not in spec:
        raise ValueError(f"grid spec must look like name=v1,v2,...; got {spec!r}")
    name, values = spec.split("=", 1)
    name = name.strip()
    if name not in GRID_KEYS:
        raise ValueError(f"grid name must be one of {sorted(GRID_KEYS)}")
    cast = float if name == "alpha" else int
    vals = [cast(v) for v in values.split(",") if v.strip()]
    if not vals:
        raise ValueError("grid is empty")
    return name, vals


def _sweep_point(args) -> dict:
    name, value, seed, flat = args
    cfg = TrainConfig.from_flat(flat)
    key = GRID_KEYS[name]
    cfg = cfg.replace(seed=seed, **{key: value})
    _, m = run(cfg)
    return {"grid": name, "value": value, "seed": seed, "metric": m.final_metric,
            "initial_metric": m.initial_metric, "param_count": m.param_count,
            "config_hash": m.config_hash}


def sweep(base: TrainConfig, grid: tuple[str, list], seeds: list[int], workers: int | None = None) -> list[dict]:
    """One row per (grid point, seed); ``mean_metric`` aggregates over seeds."""
    name, values = grid
    if not values:
        raise ValueError("sweep needs a nonempty grid")
    jobs = [(name, v, s, base.to_flat()) for v in values for s in seeds]
    if workers is None:
        workers = int(os.environ.get("CAMEX_THREADS", "1"))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(_sweep_point, jobs))
    else:
        rows = [_sweep_point(j) for j in jobs]
    means = {}
    for v in values:
        ms = [r["metric"] for r in rows if r["value"] == v]
        means[v] = float(np.mean(ms))
    for r in rows:
        r["mean_metric"] = means[r["value"]]
    return rows


def sweep_csv(rows: list[dict]) -> str:
    cols = ("grid", "value", "seed", "metric", "mean_metric", "initial_metric", "param_count", "config_hash")
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in cols})
    return buf.getvalue()
