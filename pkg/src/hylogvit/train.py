"""Training loop, evaluation and checkpoint (de)hydration of networks."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import CheckpointBundle, load_checkpoint, save_checkpoint
from .config import RunConfig, TrainConfig
from .data import DatasetManifest, Sample, augment, load_split, stack_batch
from .errors import DivergenceError, FormatError
from .losses import LossWeights, hybrid_loss, psnr, ssim_value
from .network import ModelConfig, NetworkParams, actnorm_modules, build_network, forward
from .optim import AdamState, adam_step
from .tensor import NonFiniteError, ShapeError, Tensor, no_grad

log = logging.getLogger(__name__)

CSV_HEADER = "step,L,L_R,L_S,L_D,psnr,ssim"


def _fmt(x: Optional[float]) -> str:
    if x is None:
        return ""
    if math.isinf(x):
        return "inf"
    return f"{x:.6f}"


@dataclass
class LogRow:
    step: int
    total: Optional[float] = None
    l_r: Optional[float] = None
    l_s: Optional[float] = None
    l_d: Optional[float] = None
    psnr: Optional[float] = None
    ssim: Optional[float] = None

    def csv(self) -> str:
        vals = (self.total, self.l_r, self.l_s, self.l_d, self.psnr, self.ssim)
        return ",".join([str(self.step)] + [_fmt(v) for v in vals])


def bundle_from_network(net: NetworkParams, run: RunConfig, adam: AdamState, step: int) -> CheckpointBundle:
    params = {k: np.asarray(v, dtype=np.float32) for k, v in net.state_dict().items()}
    flags = {name: m.initialized for name, m in actnorm_modules(net)}
    return CheckpointBundle(params, run.to_dict(), adam, step, flags)


def network_from_bundle(bundle: CheckpointBundle, image_size: Optional[Tuple[int, int]] = None) -> Tuple[NetworkParams, RunConfig]:
    """Rebuild a network from a checkpoint, optionally for another image size."""
    run = RunConfig.from_dict(bundle.config)
    model = run.model
    if image_size is not None and image_size != (model.image_height, model.image_width):
        d = asdict(model)
        d["image_height"], d["image_width"] = image_size
        model = ModelConfig(**d)
    net = build_network(model, run.train.seed)
    named = dict(net.named_parameters())
    if set(named) != set(bundle.params):
        missing = sorted(set(named) - set(bundle.params))[:3]
        extra = sorted(set(bundle.params) - set(named))[:3]
        raise FormatError(f"checkpoint parameters do not match config (missing {missing}, unexpected {extra})")
    for name, p in named.items():
        arr = bundle.params[name]
        if arr.shape != p.shape:
            raise ShapeError(f"checkpoint {name} has shape {arr.shape}, network expects {p.shape}")
        p.data = arr.astype(p.dtype)
    for name, m in actnorm_modules(net):
        m.initialized = bundle.actnorm_initialized.get(name, False)
    return net, run


def _batches(n: int, size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + size] for i in range(0, n, size)]


def _targets(batch: Dict[str, np.ndarray]):
    return Tensor(batch["reflectance"]), Tensor(batch["shading"]), Tensor(batch["clear"])


def evaluate_network(net: NetworkParams, samples: Sequence[Sample], batch_size: int = 4) -> Tuple[float, float]:
    """Mean PSNR and SSIM of the dehazed output against the clear image."""
    net.eval()
    scores, sims = [], []
    with no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i : i + batch_size]
            batch = stack_batch(chunk)
            out = forward(Tensor(batch["hazy"]), net).dehazed.data
            for pred, s in zip(out, chunk):
                scores.append(psnr(pred, s.clear))
                sims.append(ssim_value(pred, s.clear))
    return float(np.mean(scores)), float(np.mean(sims))


def baseline_scores(samples: Sequence[Sample]) -> Tuple[float, float]:
    """PSNR/SSIM of the hazy inputs themselves, the level a model must beat."""
    return (float(np.mean([psnr(s.hazy, s.clear) for s in samples])),
            float(np.mean([ssim_value(s.hazy, s.clear) for s in samples])))


def train(run: RunConfig, manifest: DatasetManifest, out_dir, epochs: Optional[int] = None,
          seed: Optional[int] = None, evaluate_each_epoch: bool = True) -> Tuple[CheckpointBundle, List[LogRow]]:
    """Train on the manifest's ``train`` split; write ``metrics.csv`` and checkpoints to ``out_dir``.

    Raises :class:`DivergenceError` carrying the step index on a non-finite loss.
    """
    tc: TrainConfig = run.train
    if epochs is not None:
        tc.epochs = epochs
    if seed is not None:
        tc.seed = seed
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    train_set = load_split(manifest, "train")
    if not train_set:
        raise FileNotFoundError(f"no training samples in {manifest.root}")
    test_set = load_split(manifest, "test")
    h, w = train_set[0].depth.shape
    if (h, w) != (run.model.image_height, run.model.image_width):
        raise ShapeError(f"dataset images are {h}x{w}, model built for "
                         f"{run.model.image_height}x{run.model.image_width}")

    net = build_network(run.model, tc.seed)
    net.train()
    params = dict(net.named_parameters())
    names = set(params)
    state = AdamState(lr=tc.lr)
    weights = LossWeights(tc.lambda_r, tc.lambda_s, tc.lambda_d)
    rng = np.random.default_rng(tc.seed)
    rows: List[LogRow] = []
    step = 0
    csv_path = out / "metrics.csv"
    bundle = None

    with csv_path.open("w", encoding="utf-8", newline="\n") as csv:
        csv.write(CSV_HEADER + "\n")
        for epoch in range(1, tc.epochs + 1):
            for idx in _batches(len(train_set), tc.batch_size, rng):
                if tc.max_steps is not None and step >= tc.max_steps:
                    break
                chunk = [train_set[i] for i in idx]
                if tc.augment:
                    chunk = [augment(s, int(rng.integers(2**31))) for s in chunk]
                batch = stack_batch(chunk)
                step += 1
                net.train()
                try:
                    outputs = forward(Tensor(batch["hazy"]), net)
                    loss = hybrid_loss(outputs, _targets(batch), weights, run.model.decoders)
                    total = float(loss.total.data)
                    if not math.isfinite(total):
                        raise DivergenceError(step)
                    for p in params.values():
                        p.grad = None
                    loss.total.backward()
                except NonFiniteError as exc:
                    raise DivergenceError(step, str(exc)) from None
                if set(dict(net.named_parameters())) != names:
                    raise RuntimeError(f"parameter set changed at step {step}")
                adam_step(params, state)
                row = LogRow(step, total, loss.l_r, loss.l_s, loss.l_d)
                if step % tc.log_every == 0 or step == 1:
                    rows.append(row)
                    csv.write(row.csv() + "\n")
                    log.info("step %d loss %.4f", step, total)
            if evaluate_each_epoch and test_set:
                p_val, s_val = evaluate_network(net, test_set, tc.batch_size)
                row = LogRow(step, psnr=p_val, ssim=s_val)
                rows.append(row)
                csv.write(row.csv() + "\n")
                log.info("epoch %d psnr %.3f ssim %.4f", epoch, p_val, s_val)
            bundle = bundle_from_network(net, run, state, step)
            save_checkpoint(out / f"epoch{epoch:03d}.hylg", bundle)
            if tc.max_steps is not None and step >= tc.max_steps:
                break
    save_checkpoint(out / "final.hylg", bundle)
    return bundle, rows


def evaluate(checkpoint, manifest: DatasetManifest, split: str = "test") -> Tuple[float, float]:
    bundle = checkpoint if isinstance(checkpoint, CheckpointBundle) else load_checkpoint(checkpoint)
    samples = load_split(manifest, split)
    if not samples:
        raise FileNotFoundError(f"no {split!r} samples in {manifest.root}")
    net, run = network_from_bundle(bundle)
    h, w = samples[0].depth.shape
    if (h, w) != (run.model.image_height, run.model.image_width):
        raise ShapeError(f"checkpoint built for {run.model.image_height}x{run.model.image_width}, images are {h}x{w}")
    return evaluate_network(net, samples, run.train.batch_size)
