"""Training loop (SGD with momentum, exponential LR decay), the ranked
source-set evaluation protocol, and report generation.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from . import protocol
from . import tensor as T
from .field import FieldModel, ModelConfig
from .render import model_field_fn, render_image, render_rays, rendering_loss
from .scenes import load_dataset, oracle_field_fn


@dataclass
class TrainConfig:
    dataset: str = ""
    iterations: int = 2000
    rays_per_batch: int = 128
    samples_per_ray: int = 16
    learning_rate: float = 0.05
    lr_decay: float = 0.3          # total multiplicative decay over the run
    momentum: float = 0.9
    grad_clip: float = 1.0         # global-norm clip; 0 disables
    seed: int = 0
    checkpoint_interval: int = 500
    log_interval: int = 50
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if min(self.iterations, self.rays_per_batch, self.samples_per_ray) < 1:
            raise ValueError("iterations, rays_per_batch and samples_per_ray must be >= 1")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, path):
        with open(path) as f:
            return cls(**json.load(f))

    def config_hash(self):
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class TrainResult:
    model: FieldModel
    losses: np.ndarray
    checkpoint_path: str


class MomentumSGD:
    """Plain gradient descent with momentum and optional global-norm clipping."""

    def __init__(self, store, lr, momentum=0.9, grad_clip=0.0):
        self.store = store
        self.lr = lr
        self.momentum = momentum
        self.grad_clip = grad_clip
        self.velocity = {name: np.zeros(t.shape) for name, t in store.items()}

    def step(self, grads_by_name):
        if self.grad_clip > 0.0:
            total = np.sqrt(sum(float((g * g).sum())
                                for g in grads_by_name.values()))
            if total > self.grad_clip:
                scale = self.grad_clip / total
                grads_by_name = {k: g * scale for k, g in grads_by_name.items()}
        for name, t in self.store.items():
            v = self.velocity[name]
            v *= self.momentum
            v += grads_by_name[name]
            t.data -= self.lr * v


def _select_sources(model, dataset, view_ids):
    images = dataset.images[view_ids]
    cameras = [dataset.cameras[i] for i in view_ids]
    return model.prepare_sources(images, cameras)


def train(cfg, out_dir, progress=None):
    """Run the full seeded training loop; returns the model and loss curve.

    Per iteration: pick a random train view as target, draw conditioning
    views from the remaining train views, render a random ray batch
    through the field, and descend the squared rendering loss.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(cfg.dataset)
    if not dataset.train_ids:
        raise ValueError("dataset has no training views")

    model = FieldModel(cfg.model)
    rng = np.random.default_rng(cfg.seed)
    decay = cfg.lr_decay ** (1.0 / max(cfg.iterations - 1, 1))
    opt = MomentumSGD(model.params, cfg.learning_rate, cfg.momentum, cfg.grad_clip)
    losses = np.empty(cfg.iterations)
    ckpt_path = out_dir / "checkpoint.bin"

    for it in range(cfg.iterations):
        target_id = int(rng.choice(dataset.train_ids))
        pool_ids = [i for i in dataset.train_ids if i != target_id]
        picked = protocol.sample_source_views(dataset.cameras[target_id],
                                              [dataset.cameras[i] for i in pool_ids],
                                              rng)
        cam = dataset.cameras[target_id]
        px = rng.integers(0, cam.width, size=cfg.rays_per_batch).astype(np.float64)
        py = rng.integers(0, cam.height, size=cfg.rays_per_batch).astype(np.float64)
        gt = dataset.images[target_id][py.astype(int), px.astype(int)]

        with T.Tape() as tape:
            sources = _select_sources(model, dataset, [pool_ids[i] for i in picked])
            color, _ = render_rays(cam, model_field_fn(model, sources),
                                   px, py, cfg.samples_per_ray, rng=rng)
            loss = rendering_loss(color, gt)
        grads = model.params.gradients(T.backward(tape, loss))
        opt.step(grads)
        opt.lr *= decay
        losses[it] = float(loss.data) / cfg.rays_per_batch
        if progress and (it % cfg.log_interval == 0 or it == cfg.iterations - 1):
            progress(it, losses[it])
        if cfg.checkpoint_interval and (it + 1) % cfg.checkpoint_interval == 0:
            model.save(ckpt_path)

    model.save(ckpt_path)
    np.savetxt(out_dir / "loss.txt", losses)
    return TrainResult(model, losses, str(ckpt_path))


@dataclass
class EvalReport:
    """Per source-set metric means plus per-view breakdown and provenance."""

    rows: list                      # [{"set", "psnr", "ssim", "per_view": [...]}]
    checkpoint: str
    seed: int
    config_hash: str

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1)

    def table(self):
        lines = [f"{'set':<6}{'PSNR (dB)':>12}{'SSIM':>10}"]
        for row in self.rows:
            lines.append(f"{row['set']:<6}{row['psnr']:>12.3f}{row['ssim']:>10.4f}")
        return "\n".join(lines)

    def mean_psnr(self, set_name):
        for row in self.rows:
            if row["set"] == set_name:
                return row["psnr"]
        raise KeyError(set_name)


def evaluate(dataset, n_sets, field_for_sources, n_samples=16, checkpoint="",
             seed=0, config_hash="", rotation_weight=1.0):
    """Score every held-out view against ground truth for each ranked set.

    ``field_for_sources(view_ids)`` returns a renderer field function
    conditioned on those dataset views (or ignoring them, for the oracle
    stand-in). Rendering is deterministic (midpoint sampling).
    """
    if not dataset.test_ids:
        raise ValueError("dataset has no held-out test views")
    rows = [{"set": f"S{i + 1}", "psnr": 0.0, "ssim": 0.0, "per_view": []}
            for i in range(n_sets)]
    for test_id in dataset.test_ids:
        target = dataset.cameras[test_id]
        pool_ids = [i for i in dataset.train_ids
                    if protocol.pose_difference(target, dataset.cameras[i]) > 0.0]
        sets = protocol.rank_source_sets(target,
                                         [dataset.cameras[i] for i in pool_ids],
                                         n_sets, rotation_weight)
        gt = dataset.images[test_id]
        for row, members in zip(rows, sets):
            view_ids = [pool_ids[i] for i in members]
            img = render_image(target, field_for_sources(view_ids), n_samples,
                               sampler="midpoint")
            row["per_view"].append({
                "view": test_id,
                "sources": view_ids,
                "psnr": metrics.psnr(img.rgb, gt),
                "ssim": metrics.ssim(img.rgb, gt),
            })
    for row in rows:
        row["psnr"] = float(np.mean([v["psnr"] for v in row["per_view"]]))
        row["ssim"] = float(np.mean([v["ssim"] for v in row["per_view"]]))
    return EvalReport(rows, checkpoint, seed, config_hash)


def model_evaluator(model, dataset, n_sets, n_samples=16, checkpoint=""):
    def fields(view_ids):
        return model_field_fn(model, _select_sources(model, dataset, view_ids))

    return evaluate(dataset, n_sets, fields, n_samples, checkpoint=checkpoint,
                    seed=model.config.seed)


def oracle_evaluator(dataset, n_sets, n_samples=256):
    """Perfect-model stand-in: renders the analytic field, ignoring sources."""
    fn = oracle_field_fn(dataset.scene)
    return evaluate(dataset, n_sets, lambda view_ids: fn, n_samples,
                    checkpoint="analytic-oracle")
