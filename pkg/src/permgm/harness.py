"""Training, evaluation, sweeps and checkpoints.

Every source of randomness is derived from ``ExperimentConfig.seed`` through
``numpy.random.SeedSequence`` with a fixed stream tag per phase (parameter
init, training data, eval data), so a (seed, config) pair determines every
number in a :class:`ResultRecord` except wall-clock time.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import struct
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import baselines as bl
from . import diffcore as dc
from . import embed, graphs, losses
from .assign import hungarian_indices
from .graphs import SyntheticConfig

log = logging.getLogger(__name__)

LEARNED = ("PIA", "PCA", "PCA-iterative", "GMN", "GMN-PL")
METHODS = LEARNED + ("SM-unlearned",)
LOSSES = ("permutation", "offset")
SWEEP_AXES = ("k_pt", "sigma_feat", "iterations")
CSV_HEADER = ["method", "axis", "value", "seed", "mean_acc", "std_acc", "epochs", "wallclock_s"]

# stream tags for SeedSequence
_INIT, _TRAIN, _EVAL = 0, 1, 2


class NonFiniteLossError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class OptimizerSettings:
    """SGD with momentum; ``clip_norm`` caps the global gradient norm (0 disables)."""

    lr: float = 1e-2
    momentum: float = 0.9
    batch_size: int = 8
    epochs: int = 200
    pairs_per_epoch: int = 1000
    clip_norm: float = 3.0

    def __post_init__(self):
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("need lr > 0 and 0 <= momentum < 1")
        if self.batch_size < 1 or self.epochs < 0 or self.pairs_per_epoch < 1:
            raise ValueError("batch_size and pairs_per_epoch must be >= 1, epochs >= 0")
        if self.clip_norm < 0:
            raise ValueError("clip_norm must be >= 0")


@dataclass
class ExperimentConfig:
    method: str = "PCA"
    loss: str | None = None
    synthetic: SyntheticConfig | None = field(default_factory=SyntheticConfig)
    dataset: str | None = None            # JSONL training pairs (replaces synthetic training data)
    eval_dataset: str | None = None
    eval_pairs: int = 500
    optimizer: OptimizerSettings | None = None
    sinkhorn: embed.SinkhornSettings = field(default_factory=embed.SinkhornSettings)
    hidden: int = 512
    tau: float = embed.DEFAULT_TAU
    iterations: int = 1
    sm_sigma: float | None = None         # None -> median heuristic per instance
    gmn_sm_iters: int = 10
    gmn_scale: float = 200.0
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.method == "SM-unlearned":
            if self.loss is not None or self.optimizer is not None:
                raise ValueError("SM-unlearned takes no loss or optimizer settings")
        else:
            if self.loss is None:
                self.loss = "offset" if self.method == "GMN" else "permutation"
            if self.method == "GMN" and self.loss != "offset":
                raise ValueError("GMN trains with the offset loss; use GMN-PL for the permutation loss")
            if self.method == "GMN-PL" and self.loss != "permutation":
                raise ValueError("GMN-PL trains with the permutation loss")
            if self.optimizer is None:
                self.optimizer = OptimizerSettings()
        if self.loss is not None and self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.synthetic is None and (self.eval_dataset is None or
                                       (self.method in LEARNED and self.dataset is None)):
            raise ValueError("need a synthetic config or dataset paths")
        if self.eval_pairs < 1 or self.hidden < 1 or self.iterations < 1:
            raise ValueError("eval_pairs, hidden and iterations must be >= 1")

    @property
    def learned(self):
        return self.method in LEARNED

    @property
    def needs_edge_features(self):
        return self.method in ("GMN", "GMN-PL", "SM-unlearned")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        if isinstance(d.get("synthetic"), dict):
            d["synthetic"] = SyntheticConfig(**d["synthetic"])
        if isinstance(d.get("optimizer"), dict):
            d["optimizer"] = OptimizerSettings(**d["optimizer"])
        if isinstance(d.get("sinkhorn"), dict):
            d["sinkhorn"] = embed.SinkhornSettings(**d["sinkhorn"])
        return cls(**d)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def _rng(seed, tag):
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))


def eval_set_for(config):
    if config.eval_dataset is not None:
        return graphs.load_pairs(config.eval_dataset)
    return graphs.generate_pairs(config.synthetic, config.eval_pairs, seed=_rng(config.seed, _EVAL))


# -- models ---------------------------------------------------------------------


def _input_dims(config):
    if config.synthetic is not None:
        return config.synthetic.node_feature_dim, config.synthetic.edge_feature_dim
    probe = graphs.load_pairs(config.dataset or config.eval_dataset)[0]
    ef = probe.g1.edge_features
    return probe.g1.node_features.shape[1], (0 if ef is None else ef.shape[1])


def build_from_config(config, rng=None):
    rng = rng if rng is not None else _rng(config.seed, _INIT)
    node_dim, edge_dim = _input_dims(config)
    if config.method in ("GMN", "GMN-PL"):
        return bl.GmnModel(node_dim, edge_dim, loss=config.loss, sm_iters=config.gmn_sm_iters,
                           scale=config.gmn_scale, sinkhorn_train_iters=config.sinkhorn.train_iters,
                           sinkhorn_eval_iters=config.sinkhorn.eval_iters, tol=config.sinkhorn.tol)
    if config.method == "SM-unlearned":
        return None
    return embed.build_model(config.method, node_dim, hidden=config.hidden, tau=config.tau,
                             iterations=config.iterations, rng=rng, sinkhorn=config.sinkhorn)


def parameter_checksum(model):
    h = hashlib.sha256()
    for p in model.parameters():
        h.update(p.name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


# -- checkpoints ------------------------------------------------------------------

MAGIC = b"PERMGMCK"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")    # magic, format version, header length


@dataclass
class Checkpoint:
    descriptor: dict
    params: dict                     # name -> float64 array, in model order
    step: int
    rng_state: dict | None
    config: dict
    code_version: str = __version__


def checkpoint_from_model(model, config, step=0, rng=None):
    return Checkpoint(dict(model.descriptor), {p.name: p.data.copy() for p in model.parameters()},
                      step, None if rng is None else rng.bit_generator.state, config.to_dict())


def checkpoint_save(path, ckpt):
    arrays = [{"name": k, "shape": list(v.shape)} for k, v in ckpt.params.items()]
    header = json.dumps({"descriptor": ckpt.descriptor, "arrays": arrays, "step": ckpt.step,
                         "rng_state": ckpt.rng_state, "config": ckpt.config,
                         "code_version": ckpt.code_version}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)))
    buf.write(header)
    for v in ckpt.params.values():
        buf.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def checkpoint_load(path, expect=None):
    """Read a checkpoint; ``expect`` (an ExperimentConfig) checks architecture compatibility."""
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint (no header)")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version}, "
                              f"this build reads version {FORMAT_VERSION}")
    if len(raw) < _PREFIX.size + hlen:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(raw[_PREFIX.size:_PREFIX.size + hlen])
    except ValueError as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from None
    offset = _PREFIX.size + hlen
    need = sum(8 * math.prod(a["shape"]) for a in header["arrays"])
    if len(raw) - offset != need:
        raise CheckpointError(f"{path}: truncated checkpoint payload "
                              f"({len(raw) - offset} of {need} bytes)")
    params = {}
    for a in header["arrays"]:
        count = math.prod(a["shape"])
        params[a["name"]] = np.frombuffer(raw, "<f8", count, offset).reshape(a["shape"]).astype(np.float64)
        offset += 8 * count
    ckpt = Checkpoint(header["descriptor"], params, header["step"], header["rng_state"],
                      header["config"], header["code_version"])
    if expect is not None:
        have = ckpt.descriptor.get("hidden")
        if have is not None and have != expect.hidden:
            raise CheckpointError(f"hidden width mismatch: checkpoint has {have}, config asks for {expect.hidden}")
        if ckpt.descriptor.get("kind") != expect.method:
            raise CheckpointError(f"model kind mismatch: checkpoint has {ckpt.descriptor.get('kind')}, "
                                  f"config asks for {expect.method}")
    return ckpt


def model_from_checkpoint(ckpt):
    config = ExperimentConfig.from_dict(ckpt.config)
    model = build_from_config(config)
    named = model.named_parameters()
    if set(named) != set(ckpt.params):
        raise CheckpointError("checkpoint parameters do not match the architecture")
    for name, value in ckpt.params.items():
        if named[name].shape != value.shape:
            raise CheckpointError(f"{name}: shape {value.shape} vs model {named[name].shape}")
        named[name].tensor.data = value.copy()
    return model, config


# -- training ---------------------------------------------------------------------


@dataclass
class ResultRecord:
    config: dict
    train_losses: list
    mean_acc: float | None
    std_acc: float | None
    accuracies: list
    n_skipped: int
    sinkhorn: dict
    wallclock_s: float
    code_version: str = __version__

    def numbers(self):
        """Everything except wall-clock time; bit-identical for the same (seed, config)."""
        d = dataclasses.asdict(self)
        d.pop("wallclock_s")
        return d

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


def _sinkhorn_summary(stats):
    if not stats:
        return {"calls": 0}
    return {"calls": len(stats),
            "converged_fraction": float(np.mean([s.converged for s in stats])),
            "max_deviation": float(max(s.deviation for s in stats)),
            "mean_iterations": float(np.mean([s.iterations for s in stats]))}


def _training_pairs(config, rng, pool):
    n = config.optimizer.pairs_per_epoch
    if pool is None:
        syn = config.synthetic
        if not config.needs_edge_features:
            # node-only models never read edge features; drawing them costs ~70% of generation
            syn = dataclasses.replace(syn, edge_feature_dim=0)
        return [graphs.generate_synthetic_pair(syn, rng) for _ in range(n)]
    order = rng.permutation(len(pool))
    return [pool[i] for i in order[:n]]


def _batches(pairs, size):
    """Consecutive chunks of equal node count, in first-seen order."""
    by_n = {}
    for i, p in enumerate(pairs):
        by_n.setdefault(p.n, []).append(i)
    for idx in by_n.values():
        for k in range(0, len(idx), size):
            yield idx[k:k + size]


def _pair_loss(config, model, pairs, stats):
    """Mean loss over ``pairs`` (all with the same node count)."""
    if config.method in ("GMN", "GMN-PL"):
        total = None
        for p in pairs:
            log_s = bl.gmn_forward_log(model, p, training=True, stats=stats)
            if config.loss == "offset":
                l = losses.offset_loss(dc.exp(log_s), losses.OffsetContext(p.g1.coords, p.g2.coords),
                                       p.gt_permutation)
            else:
                l = losses.permutation_loss_from_log(log_s, p.gt_permutation)
            total = l if total is None else total + l
        return total * (1.0 / len(pairs))
    batch = embed.make_batch(pairs)
    log_s = embed.batch_forward_log(model, batch, training=True, stats=stats)
    if config.loss == "offset":
        return losses.offset_loss(dc.exp(log_s), losses.OffsetContext(batch.coords1, batch.coords2),
                                  batch.gt)
    return losses.permutation_loss_from_log(log_s, batch.gt)


def _nonfinite_report(config, model, pairs, first_index):
    with dc.no_record():
        per_pair = [_pair_loss(config, model, [p], None).item() for p in pairs]
    bad = next((first_index + i for i, v in enumerate(per_pair) if not np.isfinite(v)), first_index)
    norms = {p.name: float(np.linalg.norm(p.data)) for p in model.parameters()}
    return f"non-finite loss at training pair {bad}; parameter norms {norms}"


def train(config, eval_set=None, log_every=0):
    """Train ``config`` and evaluate; returns ``(Checkpoint, ResultRecord)``.

    ``eval_set`` overrides the config's eval pairs (handy for paired
    comparisons that reuse one generated set).
    """
    t0 = time.perf_counter()
    if not config.learned:
        record = evaluate(None, eval_set if eval_set is not None else eval_set_for(config), config)
        record.wallclock_s = time.perf_counter() - t0
        return None, record
    model = build_from_config(config)
    params = model.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    opt = config.optimizer
    data_rng = _rng(config.seed, _TRAIN)
    pool = graphs.load_pairs(config.dataset) if config.dataset is not None else None
    if pool is not None and not pool:
        raise ValueError(f"{config.dataset}: training set is empty")
    stats, epoch_losses, step, seen = [], [], 0, 0
    for epoch in range(opt.epochs):
        pairs = _training_pairs(config, data_rng, pool)
        running = []
        for idx in _batches(pairs, opt.batch_size):
            chunk = [pairs[i] for i in idx]
            with dc.ComputationRecord() as rec:
                loss = _pair_loss(config, model, chunk, stats)
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteLossError(_nonfinite_report(config, model, chunk, seen + idx[0]))
            grads = dc.backward(loss, rec)
            g = [grads.get(p, np.zeros_like(p.data)) for p in params]
            norm = math.sqrt(sum(float((x * x).sum()) for x in g))
            scale = min(1.0, opt.clip_norm / norm) if opt.clip_norm > 0 and norm > 0 else 1.0
            for p, v, gp in zip(params, velocity, g):
                v *= opt.momentum
                v += scale * gp
                p.tensor.data -= opt.lr * v
            running.append(value)
            step += 1
        seen += len(pairs)
        epoch_losses.append(float(np.mean(running)))
        if log_every and (epoch + 1) % log_every == 0:
            log.info("%s epoch %d loss %.4f", config.method, epoch + 1, epoch_losses[-1])
    ckpt = checkpoint_from_model(model, config, step, data_rng)
    record = evaluate(model, eval_set if eval_set is not None else eval_set_for(config), config)
    record.train_losses = epoch_losses
    record.sinkhorn["train"] = _sinkhorn_summary(stats)
    record.wallclock_s = time.perf_counter() - t0
    return ckpt, record


# -- evaluation -------------------------------------------------------------------


def predictor_for(model, config, chunk=50):
    """Callable mapping a list of same-size pairs to a list of permutation index arrays."""
    stats = []

    if config.method == "SM-unlearned":
        def predict(pairs):
            return [hungarian_indices(bl.sm_predict(p, config.sm_sigma)) for p in pairs]
    elif config.method in ("GMN", "GMN-PL"):
        def predict(pairs):
            with dc.no_record():
                return [hungarian_indices(bl.gmn_forward_log(model, p, False, stats).data) for p in pairs]
    else:
        def predict(pairs):
            out = []
            with dc.no_record():
                for k in range(0, len(pairs), chunk):
                    log_s = embed.batch_forward_log(model, embed.make_batch(pairs[k:k + chunk]),
                                                    training=False, stats=stats)
                    out.extend(hungarian_indices(s) for s in log_s.data)
            return out
    predict.stats = stats
    return predict


def evaluate_predictor(predict, pairs, expected_n=None, config=None):
    """Accuracy of ``predict`` over ``pairs``; pairs with the wrong size are skipped."""
    if not pairs:
        raise ValueError("evaluation set is empty")
    keep = [p for p in pairs if expected_n is None or p.n == expected_n]
    skipped = len(pairs) - len(keep)
    if skipped:
        warnings.warn(f"skipped {skipped} eval pairs whose node count differs from {expected_n}")
    accs = []
    for idx in _batches(keep, len(keep)):
        group = [keep[i] for i in idx]
        for p, pred in zip(group, predict(group)):
            accs.append(float((pred == p.gt_indices).mean()))
    stats = getattr(predict, "stats", [])
    return ResultRecord(config.to_dict() if config is not None else {}, [],
                        float(np.mean(accs)) if accs else None, float(np.std(accs)) if accs else None,
                        accs, skipped, {"eval": _sinkhorn_summary(stats)}, 0.0)


def evaluate(model, eval_set, config, expected_n=None):
    """Forward, Hungarian and accuracy on every pair.  Never touches the parameters."""
    t0 = time.perf_counter()
    if expected_n is None and config.synthetic is not None and config.eval_dataset is None:
        expected_n = config.synthetic.k_pt
    record = evaluate_predictor(predictor_for(model, config), list(eval_set), expected_n, config)
    record.wallclock_s = time.perf_counter() - t0
    return record


def evaluate_checkpoint(path, eval_set=None):
    model, config = model_from_checkpoint(checkpoint_load(path))
    return evaluate(model, eval_set if eval_set is not None else eval_set_for(config), config)


# -- sweeps -----------------------------------------------------------------------


def _at(config, method, axis, value):
    syn = config.synthetic
    changes = {}
    if axis == "k_pt":
        syn = dataclasses.replace(syn, k_pt=int(value))
    elif axis == "sigma_feat":
        syn = dataclasses.replace(syn, sigma_feat=float(value))
    elif axis == "iterations":
        changes["iterations"] = int(value)
    else:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    if method == "SM-unlearned":
        return config.replace(method=method, loss=None, optimizer=None, synthetic=syn, **changes)
    opt = config.optimizer or OptimizerSettings()
    loss = config.loss if method not in ("GMN", "GMN-PL") else None
    return config.replace(method=method, loss=loss, optimizer=opt, synthetic=syn, **changes)


def sweep(base, axis, values, methods, seeds=None, csv_path=None):
    """Train and evaluate every method at every axis value; returns CSV rows as dicts.

    A failing cell is logged and written with ``failed`` in its accuracy
    columns; the sweep carries on.  Methods at the same (value, seed) share
    one eval set, so the comparison is paired.
    """
    if not values:
        raise ValueError("sweep needs at least one value")
    if base.synthetic is None:
        raise ValueError("sweeps run on the synthetic protocol")
    seeds = [base.seed] if seeds is None else list(seeds)
    rows = []
    for value in values:
        for seed in seeds:
            shared = None
            for method in methods:
                t0 = time.perf_counter()
                row = {"method": method, "axis": axis, "value": value, "seed": seed}
                try:
                    cfg = _at(base.replace(seed=seed), method, axis, value)
                    if shared is None:
                        shared = eval_set_for(cfg)
                    _, rec = train(cfg, eval_set=shared)
                    row.update(mean_acc=rec.mean_acc, std_acc=rec.std_acc,
                               epochs=cfg.optimizer.epochs if cfg.optimizer else 0)
                except Exception as e:      # noqa: BLE001 - a failed cell must not stop the sweep
                    log.warning("sweep cell %s %s=%s seed %s failed: %s", method, axis, value, seed, e)
                    row.update(mean_acc="failed", std_acc="failed", epochs=0)
                row["wallclock_s"] = round(time.perf_counter() - t0, 3)
                rows.append(row)
                if csv_path is not None:
                    write_csv(csv_path, rows)
    return rows


def write_csv(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_HEADER)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(r[k]) if isinstance(r[k], float) else r[k] for k in CSV_HEADER})


def read_csv(path):
    def num(s):
        if s in ("failed", ""):
            return s
        try:
            return int(s)
        except ValueError:
            return float(s)

    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [{k: (v if k in ("method", "axis") else num(v)) for k, v in row.items()} for row in reader]


# -- gradient suite ---------------------------------------------------------------


def _tiny_pair(seed, n=5, dim=6, edge_dim=0):
    cfg = SyntheticConfig(k_pt=n, node_feature_dim=dim, edge_feature_dim=edge_dim, sigma_feat=0.3)
    return graphs.generate_synthetic_pair(cfg, np.random.default_rng(seed))


def gradient_suite(seed=0, tolerance=1e-4, gmn_tolerance=1e-3):
    """Finite-difference checks of every differentiable stage on 4-5 node instances.

    Returns a list of ``(name, GradCheckReport)``.
    """
    rng = np.random.default_rng(seed)
    out = []
    fixed = embed.SinkhornSettings(train_iters=10, tol=0.0)
    pair = _tiny_pair(seed)
    adj = pair.g1.adjacency

    layer = embed.GConvLayer("gconv", 3, 4, rng)
    h = dc.Parameter("h", rng.normal(size=(5, 3)))
    w = rng.normal(size=(5, 4))
    out.append(("gconv", dc.finite_diff_check(lambda: (layer(adj, h.tensor) * w).sum(),
                                              layer.parameters() + [h], tolerance=tolerance)))

    cross = embed.CrossConvLayer("cross", 3, rng)
    s = dc.Parameter("s", rng.uniform(0, 1, (4, 4)))
    h1, h2 = dc.Parameter("h1", rng.normal(size=(4, 3))), dc.Parameter("h2", rng.normal(size=(4, 3)))
    w1, w2 = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))

    def cross_fn():
        a, b = cross(s.tensor, h1.tensor, h2.tensor)
        return (a * w1).sum() + (b * w2).sum()

    out.append(("cross-conv", dc.finite_diff_check(cross_fn, cross.parameters() + [s, h1, h2],
                                                   tolerance=tolerance)))

    metric = embed.AffinityMetric("affinity", 3, rng, tau=0.5)
    wa = rng.normal(size=(4, 4))
    out.append(("affinity", dc.finite_diff_check(lambda: (metric(h1.tensor, h2.tensor) * wa).sum(),
                                                 metric.parameters() + [h1, h2], tolerance=tolerance)))

    from .assign import log_sinkhorn
    m = dc.Parameter("scores", rng.uniform(-1, 1, (5, 5)))
    ws = rng.uniform(0, 1, (5, 5))
    out.append(("sinkhorn-unrolled", dc.finite_diff_check(
        lambda: (dc.exp(log_sinkhorn(m.tensor, 10, 0.0)[0]) * ws).sum(), [m], tolerance=tolerance)))

    gt = pair.gt_permutation
    ctx = losses.OffsetContext(pair.g1.coords, pair.g2.coords)

    def soft():
        return dc.exp(m.tensor - dc.logsumexp(m.tensor, axis=1))

    out.append(("permutation-loss", dc.finite_diff_check(lambda: losses.permutation_loss(soft(), gt), [m],
                                                         tolerance=tolerance)))
    out.append(("offset-loss", dc.finite_diff_check(lambda: losses.offset_loss(soft(), ctx, gt), [m],
                                                    tolerance=tolerance)))

    for kind in embed.MODEL_KINDS:
        model = embed.build_model(kind, 6, hidden=4, iterations=2, rng=rng, sinkhorn=fixed)

        def model_fn(model=model):
            log_s = embed.forward_log(model, pair.g1.node_features, pair.g2.node_features,
                                      pair.g1.adjacency, pair.g2.adjacency)
            return losses.permutation_loss_from_log(log_s, gt)

        out.append((f"{kind}-forward", dc.finite_diff_check(model_fn, model.parameters(),
                                                            tolerance=tolerance)))

    gpair = _tiny_pair(seed + 1, n=4, dim=3, edge_dim=3)
    gmn = bl.GmnModel(3, 3, sinkhorn_train_iters=10, tol=0.0, scale=20.0)
    gmn.node_logw.data[:] += rng.normal(0, 0.3, 3)
    gmn.edge_logw.data[:] += rng.normal(0, 0.3, 3)
    gctx = losses.OffsetContext(gpair.g1.coords, gpair.g2.coords)
    out.append(("gmn-forward", dc.finite_diff_check(
        lambda: losses.offset_loss(dc.exp(bl.gmn_forward_log(gmn, gpair)), gctx, gpair.gt_permutation),
        gmn.parameters(), tolerance=gmn_tolerance)))
    return out
