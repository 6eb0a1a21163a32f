"""Two-stage trainer, optimizer, checkpointing, and the evaluation and
ablation harnesses.

Stage 1 trains everything except the refinement head on the coarse-map
loss; stage 2 trains all parameters on the combined refined/small-map
loss.  A single global iteration counter drives both the learning-rate
schedule and the data order, so a resumed run replays the interrupted one
bit for bit.
"""

from __future__ import annotations

import struct
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autograd import ContractViolation, Tensor, backward
from .data import CodecError, StereoSample, resize_nearest
from .losses import LossConfig, d1_rate, epe, loss1, loss2
from .matching import CONCAT_THEN_CONV, CONV_THEN_CONCAT, ShiftConvConfig
from .network import (
    CORRELATION,
    NetworkConfig,
    ShiftConvNet,
    config_from_scalars,
    config_to_scalars,
)


class NumericalError(RuntimeError):
    """Training hit a non-finite value; the message says where."""


@dataclass
class TrainConfig:
    base_lr: float = 2e-4
    decay_start: int = 100000
    decay_period: int = 50000
    lr_floor: float = 3e-5
    stage1_iters: int = 2000
    stage2_iters: int = 500
    batch_size: int = 1
    seed: int = 0
    log_interval: int = 100
    checkpoint_interval: int = 0
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if not (self.base_lr >= self.lr_floor > 0):
            raise ContractViolation(
                f"need base_lr >= lr_floor > 0; got {self.base_lr} / {self.lr_floor}"
            )
        for name in ("stage1_iters", "stage2_iters"):
            if getattr(self, name) < 0:
                raise ContractViolation(f"{name} must be >= 0")
        if self.decay_period < 1 or self.decay_start < 0:
            raise ContractViolation("decay_start must be >= 0, decay_period >= 1")
        if self.batch_size < 1:
            raise ContractViolation("batch_size must be >= 1")
        if self.log_interval < 1:
            raise ContractViolation("log_interval must be >= 1")


def lr_schedule(iteration: int, cfg: TrainConfig) -> float:
    """Base rate, then halving every decay period, clamped at the floor."""
    if iteration < 0:
        raise ContractViolation(f"iteration must be >= 0; got {iteration}")
    if iteration < cfg.decay_start:
        return cfg.base_lr
    # cap the exponent below float64's limit; the floor has long since
    # taken over by then
    halvings = min(1 + (iteration - cfg.decay_start) // cfg.decay_period, 1023)
    return max(cfg.base_lr / (2.0 ** halvings), cfg.lr_floor)


class Adam:
    """Adaptive-moment optimizer over a name->Tensor parameter dict.

    Moments and step counts are tracked per parameter so a tensor first
    activated in stage 2 gets fresh bias correction.  Weight decay is part
    of the loss, not of the update rule.
    """

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.t = {n: 0 for n in params}

    def step(self, lr: float, active=None):
        names = sorted(self.params) if active is None else sorted(active)
        for name in names:
            p = self.params[name]
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient in parameter {name!r}")
            t = self.t[name] + 1
            self.t[name] = t
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / (1 - self.beta1 ** t)
            v_hat = self.v[name] / (1 - self.beta2 ** t)
            step = lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.data = p.data - step.astype(p.data.dtype)


# ---------------------------------------------------------------------------
# checkpoint format: magic, u32 version/iteration/stage, then sorted records
# of (u32 name length, name, 4 x u32 extents, little-endian float32 values)
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SCNC"
CHECKPOINT_VERSION = 1


@dataclass
class LoadedCheckpoint:
    model: ShiftConvNet
    optimizer: Adam
    iteration: int
    stage: int


def _checkpoint_records(model: ShiftConvNet, optimizer: Adam | None):
    records = {f"cfg.{k}": np.full((1, 1, 1, 1), v, np.float32)
               for k, v in config_to_scalars(model.config).items()}
    for name, p in model.params.items():
        records[name] = p.data
    if optimizer is not None:
        for name in model.params:
            records[f"opt.m.{name}"] = optimizer.m[name]
            records[f"opt.v.{name}"] = optimizer.v[name]
            records[f"opt.t.{name}"] = np.full(
                (1, 1, 1, 1), optimizer.t[name], np.float32)
    return records


def checkpoint_bytes(model: ShiftConvNet, optimizer: Adam | None,
                     iteration: int, stage: int) -> bytes:
    parts = [CHECKPOINT_MAGIC,
             struct.pack("<3I", CHECKPOINT_VERSION, iteration, stage)]
    for name, arr in sorted(_checkpoint_records(model, optimizer).items()):
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<4I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(path, model: ShiftConvNet, optimizer: Adam | None,
                    iteration: int, stage: int):
    Path(path).write_bytes(checkpoint_bytes(model, optimizer, iteration, stage))


def _take(data: bytes, pos: int, count: int, what: str):
    if pos + count > len(data):
        raise CodecError(f"truncated checkpoint while reading {what}", len(data))
    return data[pos : pos + count], pos + count


def read_checkpoint_blob(data: bytes):
    """Parse checkpoint bytes into (iteration, stage, name->array)."""
    head, pos = _take(data, 0, 4, "magic")
    if head != CHECKPOINT_MAGIC:
        raise CodecError(f"bad checkpoint magic {head!r}", 0)
    head, pos = _take(data, pos, 12, "header")
    version, iteration, stage = struct.unpack("<3I", head)
    if version != CHECKPOINT_VERSION:
        raise CodecError(f"unsupported checkpoint version {version}", 4)
    records: dict[str, np.ndarray] = {}
    while pos < len(data):
        head, pos = _take(data, pos, 4, "record name length")
        (name_len,) = struct.unpack("<I", head)
        raw_name, pos = _take(data, pos, name_len, "record name")
        name = raw_name.decode("utf-8")
        head, pos = _take(data, pos, 16, f"extents of {name!r}")
        shape = struct.unpack("<4I", head)
        count = int(np.prod(shape))
        payload, pos = _take(data, pos, count * 4, f"values of {name!r}")
        records[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    return iteration, stage, records


def load_checkpoint(path) -> LoadedCheckpoint:
    """Rebuild model and optimizer from a checkpoint file.

    The network configuration is embedded as cfg.* scalars, so nothing but
    the file is needed.  Every parameter must be present with the shape the
    configuration implies; mismatches are reported by name."""
    iteration, stage, records = read_checkpoint_blob(Path(path).read_bytes())

    cfg_values = {k[len("cfg."):]: float(v.reshape(()))
                  for k, v in records.items() if k.startswith("cfg.")}
    config = config_from_scalars(cfg_values)
    model = ShiftConvNet(config, seed=0)

    expected = set(model.params)
    stored = {k for k in records
              if not k.startswith("cfg.") and not k.startswith("opt.")}
    missing = sorted(expected - stored)
    extra = sorted(stored - expected)
    if missing or extra:
        raise ContractViolation(
            f"checkpoint does not match its configuration: "
            f"missing tensors {missing}, unexpected tensors {extra}"
        )
    mismatched = [
        f"{name}: stored {records[name].shape}, expected {tuple(model.params[name].shape)}"
        for name in sorted(expected)
        if records[name].shape != model.params[name].shape
    ]
    if mismatched:
        raise ContractViolation(
            "checkpoint tensor shapes disagree with the configuration: "
            + "; ".join(mismatched)
        )
    for name in expected:
        model.params[name].data = records[name]

    optimizer = Adam(model.params)
    opt_records = {k for k in records if k.startswith("opt.")}
    if opt_records:
        needed = {f"opt.{kind}.{n}" for kind in ("m", "v", "t") for n in expected}
        missing_opt = sorted(needed - opt_records)
        if missing_opt or sorted(opt_records - needed):
            raise ContractViolation(
                f"optimizer state incomplete: missing {missing_opt}, "
                f"unexpected {sorted(opt_records - needed)}"
            )
        for name in expected:
            for kind, dest in (("m", optimizer.m), ("v", optimizer.v)):
                arr = records[f"opt.{kind}.{name}"]
                if arr.shape != model.params[name].shape:
                    raise ContractViolation(
                        f"optimizer moment opt.{kind}.{name} has shape "
                        f"{arr.shape}, expected {tuple(model.params[name].shape)}"
                    )
                dest[name] = arr
            optimizer.t[name] = int(records[f"opt.t.{name}"].reshape(()))
    return LoadedCheckpoint(model=model, optimizer=optimizer,
                            iteration=iteration, stage=stage)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def batch_indices(num_samples: int, batch_size: int, seed: int,
                  iteration: int) -> np.ndarray:
    """Deterministic sample indices for a global iteration.

    Each epoch re-shuffles with a generator keyed on (seed, epoch); no
    mutable RNG state exists, so any iteration's batch can be recomputed
    in isolation (this is what makes checkpoint-resume exact)."""
    b = min(batch_size, num_samples)
    per_epoch = num_samples // b
    epoch, k = divmod(iteration, per_epoch)
    perm = np.random.default_rng((seed, epoch)).permutation(num_samples)
    return perm[k * b : (k + 1) * b]


def stage_param_names(model: ShiftConvNet, stage: int) -> list[str]:
    if stage not in (1, 2):
        raise ContractViolation(f"stage must be 1 or 2; got {stage}")
    names = sorted(model.params)
    if stage == 1:
        names = [n for n in names if not n.startswith("refine.")]
    return names


def _stack_batch(samples, idx):
    left = np.stack([samples[i].left for i in idx])
    right = np.stack([samples[i].right for i in idx])
    gt = np.stack([samples[i].gt_disp for i in idx])
    return left, right, gt


def train_stage(model: ShiftConvNet, optimizer: Adam, samples,
                cfg: TrainConfig, stage: int, iterations: int,
                start_iteration: int = 0, log=None,
                checkpoint_cb=None) -> list[dict]:
    """Run `iterations` optimizer steps of the given stage.

    Stage 1 keeps the refinement head out of the forward pass, the update
    set, and the weight-decay sum; stage 2 trains everything.  Returns the
    per-iteration history (iteration, lr, loss, epe); `log` gets one
    formatted line every cfg.log_interval iterations."""
    if not samples:
        raise ContractViolation("training needs at least one sample")
    shapes = {s.left.shape for s in samples}
    if len(shapes) != 1:
        raise ContractViolation(f"samples disagree in shape: {sorted(shapes)}")

    active = stage_param_names(model, stage)
    decay_weights = [model.params[n] for n in active if n.endswith(".w")]
    scale_div = model.config.small_map_scale
    history = []

    for step in range(iterations):
        it = start_iteration + step
        lr = lr_schedule(it, cfg)
        idx = batch_indices(len(samples), cfg.batch_size, cfg.seed, it)
        left_np, right_np, gt = _stack_batch(samples, idx)
        left = Tensor(left_np)
        right = Tensor(right_np)

        model.zero_grad()
        out = model.forward(left, right, refine=(stage == 2))
        if stage == 1:
            loss = loss1(out.coarse_disp, gt, decay_weights, cfg.loss)
            pred = out.coarse_disp.data[:, 0]
        else:
            h, w = gt.shape[1:]
            gt_small = resize_nearest(gt, h // scale_div, w // scale_div,
                                      is_disparity=True)
            loss = loss2(out.refined_disp, gt, out.small_disp, gt_small,
                         decay_weights, cfg.loss)
            pred = out.refined_disp.data[:, 0]

        loss_value = loss.item()
        if not np.isfinite(loss_value):
            raise NumericalError(f"non-finite loss at iteration {it}")
        backward(loss)
        optimizer.step(lr, active)

        batch_epe = epe(pred, gt)
        history.append({"iteration": it, "lr": lr, "loss": loss_value,
                        "epe": batch_epe})
        if log is not None and (it % cfg.log_interval == 0
                                or step == iterations - 1):
            log(f"iter={it} lr={lr:.6g} loss={loss_value:.6g} "
                f"epe={batch_epe:.6g}")
        if (checkpoint_cb is not None and cfg.checkpoint_interval > 0
                and (step + 1) % cfg.checkpoint_interval == 0):
            checkpoint_cb(it + 1)
    return history


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@contextmanager
def frozen_params(model: ShiftConvNet):
    """Temporarily stop gradient tracking so forwards build no graph."""
    flags = {n: t.requires_grad for n, t in model.params.items()}
    for t in model.params.values():
        t.requires_grad = False
    try:
        yield
    finally:
        for n, t in model.params.items():
            t.requires_grad = flags[n]


@dataclass
class EvalReport:
    rows: list
    mean_epe: float
    mean_d1: float
    refined_mean_epe: float | None
    refined_mean_d1: float | None
    mean_forward_seconds: float

    def text_table(self) -> str:
        refined = self.refined_mean_epe is not None
        header = ["sample", "epe", "d1%"]
        if refined:
            header += ["refined_epe", "refined_d1%"]
        lines = ["  ".join(f"{h:>12}" for h in header)]
        for row in self.rows:
            cells = [row["sample"], f"{row['epe']:.4f}",
                     f"{100 * row['d1']:.2f}"]
            if refined:
                cells += [f"{row['refined_epe']:.4f}",
                          f"{100 * row['refined_d1']:.2f}"]
            lines.append("  ".join(f"{c:>12}" for c in cells))
        cells = ["mean", f"{self.mean_epe:.4f}", f"{100 * self.mean_d1:.2f}"]
        if refined:
            cells += [f"{self.refined_mean_epe:.4f}",
                      f"{100 * self.refined_mean_d1:.2f}"]
        lines.append("  ".join(f"{c:>12}" for c in cells))
        lines.append(f"mean forward time: {self.mean_forward_seconds:.4f} s")
        return "\n".join(lines)

    def csv(self) -> str:
        refined = self.refined_mean_epe is not None
        header = "sample,epe,d1_percent"
        if refined:
            header += ",refined_epe,refined_d1_percent"
        lines = [header]
        for row in self.rows:
            line = f"{row['sample']},{row['epe']:.6f},{100 * row['d1']:.4f}"
            if refined:
                line += (f",{row['refined_epe']:.6f},"
                         f"{100 * row['refined_d1']:.4f}")
            lines.append(line)
        line = f"mean,{self.mean_epe:.6f},{100 * self.mean_d1:.4f}"
        if refined:
            line += (f",{self.refined_mean_epe:.6f},"
                     f"{100 * self.refined_mean_d1:.4f}")
        lines.append(line)
        lines.append(f"mean_forward_seconds,{self.mean_forward_seconds:.6f},")
        return "\n".join(lines) + "\n"


def evaluate(model: ShiftConvNet, samples, refine: bool | None = None,
             warmup: int = 2, timed_forwards: int = 10,
             predict=None) -> EvalReport:
    """Per-sample EPE/D1 plus mean forward wall time.

    `predict(sample) -> (coarse (H,W), refined (H,W) or None)` can be
    injected for metric plumbing tests; the default runs the model.  The
    model is left untouched (gradients frozen during the run, restored
    after)."""
    if not samples:
        raise ContractViolation("evaluation needs at least one sample")
    do_refine = model.config.refine_enabled if refine is None else refine

    def model_predict(sample: StereoSample):
        left = Tensor(sample.left[None])
        right = Tensor(sample.right[None])
        out = model.forward(left, right, refine=do_refine)
        coarse = out.coarse_disp.data[0, 0]
        refined = None
        if out.refined_disp is not None:
            refined = out.refined_disp.data[0, 0]
        return coarse, refined

    fn = predict if predict is not None else model_predict

    with frozen_params(model):
        rows = []
        have_refined = True
        for i, sample in enumerate(samples):
            coarse, refined = fn(sample)
            row = {"sample": f"{i:06d}",
                   "epe": epe(coarse, sample.gt_disp),
                   "d1": d1_rate(coarse, sample.gt_disp)}
            if refined is None:
                have_refined = False
            else:
                row["refined_epe"] = epe(refined, sample.gt_disp)
                row["refined_d1"] = d1_rate(refined, sample.gt_disp)
            rows.append(row)

        for i in range(warmup):
            fn(samples[i % len(samples)])
        seconds = []
        for i in range(timed_forwards):
            t0 = time.perf_counter()
            fn(samples[i % len(samples)])
            seconds.append(time.perf_counter() - t0)

    report = EvalReport(
        rows=rows,
        mean_epe=float(np.mean([r["epe"] for r in rows])),
        mean_d1=float(np.mean([r["d1"] for r in rows])),
        refined_mean_epe=(float(np.mean([r["refined_epe"] for r in rows]))
                          if have_refined else None),
        refined_mean_d1=(float(np.mean([r["refined_d1"] for r in rows]))
                         if have_refined else None),
        mean_forward_seconds=float(np.mean(seconds)),
    )
    return report


# ---------------------------------------------------------------------------
# ablation and benchmark harnesses
# ---------------------------------------------------------------------------

ABLATION_FILTER_COUNTS = (8, 12, 16)


@dataclass
class AblationRow:
    cost_volume: str
    filters: int | None
    mean_forward_seconds: float
    epe: float


@dataclass
class AblationReport:
    rows: list
    seed: int
    iterations: int

    def text_table(self) -> str:
        lines = [f"seed={self.seed} iterations={self.iterations}",
                 "  ".join(f"{h:>24}" for h in
                           ("cost volume", "filters", "time (s)", "epe"))]
        for r in self.rows:
            filters = "-" if r.filters is None else str(r.filters)
            lines.append("  ".join(f"{c:>24}" for c in (
                r.cost_volume, filters,
                f"{r.mean_forward_seconds:.4f}", f"{r.epe:.4f}")))
        return "\n".join(lines)

    def csv(self) -> str:
        lines = ["cost_volume,filters,mean_forward_seconds,epe"]
        for r in self.rows:
            filters = "" if r.filters is None else str(r.filters)
            lines.append(f"{r.cost_volume},{filters},"
                         f"{r.mean_forward_seconds:.6f},{r.epe:.6f}")
        return "\n".join(lines) + "\n"


def ablation_suite(samples, base_cfg: NetworkConfig, train_cfg: TrainConfig,
                   iterations: int | None = None, log=None) -> AblationReport:
    """Train and evaluate the cost-volume matrix under one seed and budget.

    Rows: both shift-conv variants at 8/12/16 matching-clue filters, plus
    the fixed correlation cost volume; every cell starts from the same
    initialization seed and trains stage 1 for the same iteration count."""
    iters = train_cfg.stage1_iters if iterations is None else iterations
    cells = []
    for variant in (CONV_THEN_CONCAT, CONCAT_THEN_CONV):
        for filters in ABLATION_FILTER_COUNTS:
            shift = ShiftConvConfig(
                maxdisp=base_cfg.shift_cfg.maxdisp,
                clue_filters=filters,
                variant=variant,
                both_directions=base_cfg.shift_cfg.both_directions,
            )
            cells.append((variant, filters,
                          replace(base_cfg, shift_cfg=shift,
                                  cost_volume="shiftconv")))
    cells.append((CORRELATION, None, replace(base_cfg, cost_volume=CORRELATION)))

    rows = []
    for label, filters, cfg in cells:
        if log is not None:
            log(f"ablation cell: {label} filters={filters}")
        model = ShiftConvNet(cfg, seed=train_cfg.seed)
        optimizer = Adam(model.params)
        train_stage(model, optimizer, samples, train_cfg, stage=1,
                    iterations=iters, log=None)
        report = evaluate(model, samples, refine=False)
        rows.append(AblationRow(cost_volume=label, filters=filters,
                                mean_forward_seconds=report.mean_forward_seconds,
                                epe=report.mean_epe))
    return AblationReport(rows=rows, seed=train_cfg.seed, iterations=iters)


def parameter_count(model: ShiftConvNet) -> int:
    return int(sum(p.data.size for p in model.params.values()))


def bench_forward(cfg: NetworkConfig, height: int, width: int,
                  warmup: int = 2, repeats: int = 5, seed: int = 0) -> dict:
    """Wall-time the full forward pass on random images."""
    rng = np.random.default_rng(seed)
    shape = (1, cfg.image_channels, height, width)
    left = Tensor(rng.random(shape, dtype=np.float32))
    right = Tensor(rng.random(shape, dtype=np.float32))
    model = ShiftConvNet(cfg, seed=seed)
    with frozen_params(model):
        for _ in range(warmup):
            model.forward(left, right)
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            model.forward(left, right)
            times.append(time.perf_counter() - t0)
    return {"mean_seconds": float(np.mean(times)),
            "best_seconds": float(np.min(times)),
            "parameters": parameter_count(model)}
