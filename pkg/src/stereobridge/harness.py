"""Training, evaluation, inference and ablation drivers.

Determinism contract: all randomness flows through per-step seed
folding of (run seed, namespace, step, slot), so a resumed run
consumes exactly the data stream the uninterrupted run would have
seen, and two runs with the same config and seed agree bitwise.
"""

import dataclasses
import os
import time
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from . import report
from .bridge import forward_interpolate
from .config import (
    ConfigError,
    RunConfig,
    config_hash,
    config_items,
    resolve_out_dir,
    save_config,
)
from .dataio import StereoSample, SynthConfig, generate_pair, load_image, random_crop, write_pfm
from .model import MatchState, StereoMatcher
from .objectives import (
    MetricReport,
    compute_metrics,
    loss_initial,
    loss_pixel,
    loss_structural,
    total_loss,
)

# seed namespaces; keep stable forever, checkpoints depend on them
NS_TRAIN, NS_CROP, NS_EVAL, NS_TIME = 0, 1, 2, 3


class NumericalError(RuntimeError):
    """Raised when the objective stops being finite."""


def _fold(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def build_model(cfg: RunConfig) -> StereoMatcher:
    """Construct the network with initialization tied to the run seed."""
    torch.manual_seed(cfg.train.seed)
    return StereoMatcher(cfg.model)


def _train_scene_config(cfg: RunConfig, seed: int) -> SynthConfig:
    d = cfg.data
    return SynthConfig(
        seed=seed,
        height=d.image_height,
        width=d.image_width,
        max_disp=d.max_disp_px,
        num_shapes=d.num_shapes,
        octaves=d.octaves,
    )


def make_train_batch(cfg: RunConfig, step: int):
    """Batch for one optimizer step, a pure function of (config, step)."""
    d = cfg.data
    lefts, rights, gts, valids = [], [], [], []
    for slot in range(cfg.train.batch_size):
        scene = generate_pair(
            _train_scene_config(cfg, _fold(cfg.train.seed, NS_TRAIN, step, slot))
        )
        crop = random_crop(
            scene, d.crop_height, d.crop_width, _fold(cfg.train.seed, NS_CROP, step, slot)
        )
        l, r, g, v = crop.to_tensors()
        lefts.append(l)
        rights.append(r)
        gts.append(g)
        valids.append(v)
    return (
        torch.stack(lefts),
        torch.stack(rights),
        torch.stack(gts),
        torch.stack(valids),
    )


def eval_dataset(cfg: RunConfig, count: int) -> List[StereoSample]:
    """Held-out scenes: the eval seed namespace never appears in training."""
    d = cfg.data
    return [
        generate_pair(
            SynthConfig(
                seed=_fold(cfg.train.seed, NS_EVAL, i),
                height=d.crop_height,
                width=d.crop_width,
                max_disp=d.max_disp_px,
                num_shapes=d.num_shapes,
                octaves=d.octaves,
            )
        )
        for i in range(count)
    ]


def save_checkpoint(path, model, optimizer, scheduler, step: int, cfg: RunConfig):
    torch.save(
        {
            "model": model.state_dict(),
            "optimizer": optimizer.state_dict(),
            "scheduler": scheduler.state_dict(),
            "step": step,
            "config_hash": config_hash(cfg),
            "config_items": config_items(cfg),
        },
        path,
    )


def load_checkpoint(path, model, optimizer=None, scheduler=None, cfg: Optional[RunConfig] = None) -> int:
    """Restore states; refuses a checkpoint trained under another config."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if cfg is not None and payload.get("config_hash") != config_hash(cfg):
        raise ConfigError(
            f"checkpoint {path} was trained with config {payload.get('config_hash')}, "
            f"current config is {config_hash(cfg)}"
        )
    model.load_state_dict(payload["model"])
    if optimizer is not None and "optimizer" in payload:
        optimizer.load_state_dict(payload["optimizer"])
    if scheduler is not None and "scheduler" in payload:
        scheduler.load_state_dict(payload["scheduler"])
    return int(payload["step"])


def _loss_mask(gt: torch.Tensor, valid: torch.Tensor, cfg: RunConfig) -> torch.Tensor:
    return valid.bool() & (gt >= 0) & (gt < 4 * cfg.model.max_disp)


def _dump_diagnostics(out_dir, step, tensors: Dict[str, torch.Tensor]):
    path = os.path.join(out_dir, f"diagnostic_step{step}.pt")
    torch.save({k: v.detach() for k, v in tensors.items()}, path)
    return path


def _sequence_losses(out, cfg: RunConfig, gt, valid):
    mask = _loss_mask(gt, valid, cfg)
    l_init = loss_initial(out["disp_init_full"].squeeze(1), gt, mask)
    l_pix = loss_pixel(
        [d.squeeze(1) for d in out["seq_full"]], gt, gamma=cfg.loss.gamma, mask=mask
    )
    l_struct = loss_structural(
        out["disp_final"].squeeze(1), gt, window=cfg.loss.ssim_window,
        data_range=float(4 * cfg.model.max_disp),
    )
    return l_init, l_pix, l_struct


def _unrolled_loss(model, cfg: RunConfig, left, right, gt, valid):
    out = model(left, right, iters=cfg.train.train_iters, update_rule=cfg.train.update_rule)
    l_init, l_pix, l_struct = _sequence_losses(out, cfg, gt, valid)
    total = total_loss(l_init, l_pix, l_struct, cfg.loss)
    return total, {"init": l_init, "pixel": l_pix, "structural": l_struct}


def _bridge_loss(model, cfg: RunConfig, left, right, gt, valid, step: int):
    """Unrolled objective plus a teacher-forced velocity regression.

    The extra term interpolates between the (detached) initial field
    and ground truth at a random time and regresses the velocity
    there, which forces the operator to read the disparity it is
    handed rather than only the static volume features. The teacher
    step restarts from the context hidden state so the rollout's
    recurrence is left alone.
    """
    state = model.prepare(left, right)
    out = model(
        left, right, iters=cfg.train.train_iters,
        update_rule=cfg.train.update_rule, state=state,
    )
    l_init, l_pix, l_struct = _sequence_losses(out, cfg, gt, valid)
    gt_q = F.avg_pool2d(gt.unsqueeze(1), 4) / 4.0
    rng = np.random.default_rng(_fold(cfg.train.seed, NS_TIME, step))
    t = float(rng.uniform(0.0, 1.0))
    anchor = state.disp_init.detach()
    d_t = forward_interpolate(gt_q, anchor, t, cfg.schedule, plain_linear=cfg.train.plain_linear)
    teach = MatchState(
        lookup=state.lookup, pyramid=state.pyramid,
        hidden=list(state.pyramid.hidden), disp_init=state.disp_init,
    )
    velocity, _ = model.update_step(teach, d_t, t)
    l_vel = F.mse_loss(velocity, gt_q - anchor)
    total = total_loss(l_init, l_pix, l_struct, cfg.loss) + l_vel
    return total, {
        "init": l_init, "pixel": l_pix, "structural": l_struct, "velocity": l_vel,
    }


@dataclass
class TrainResult:
    out_dir: str
    checkpoint: str
    losses: List[float]
    lrs: List[float]
    steps: int
    seconds: float


def train(
    cfg: RunConfig,
    out_dir: Optional[str] = None,
    resume: Optional[str] = None,
    stop_after: Optional[int] = None,
    quiet: bool = True,
) -> TrainResult:
    """Optimize from scratch or from a checkpoint; emits log + figures.

    The checkpoint is refreshed every `log_every` steps so a killed run
    can restart from its last save. `stop_after` caps the number of
    steps taken this call without touching the schedule, which is how a
    controlled interruption is produced.
    """
    out = report.ensure_dir(out_dir or resolve_out_dir(cfg))
    t0 = time.time()
    model = build_model(cfg)
    model.train()
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=cfg.train.lr, weight_decay=cfg.train.weight_decay
    )
    scheduler = torch.optim.lr_scheduler.OneCycleLR(
        optimizer, max_lr=cfg.train.lr, total_steps=cfg.train.steps
    )
    start = 0
    if resume is not None:
        start = load_checkpoint(resume, model, optimizer, scheduler, cfg)
        if start >= cfg.train.steps:
            raise ConfigError(f"checkpoint already at step {start} of {cfg.train.steps}")
    stop = cfg.train.steps
    if stop_after is not None:
        stop = min(stop, start + stop_after)
    ckpt = os.path.join(out, "checkpoint.pt")
    losses: List[float] = []
    lrs: List[float] = []
    for step in range(start, stop):
        left, right, gt, valid = make_train_batch(cfg, step)
        if cfg.train.mode == "unrolled":
            total, parts = _unrolled_loss(model, cfg, left, right, gt, valid)
        else:
            total, parts = _bridge_loss(model, cfg, left, right, gt, valid, step)
        if not torch.isfinite(total):
            path = _dump_diagnostics(
                out, step, {"left": left, "right": right, "gt": gt, "loss": total, **parts}
            )
            raise NumericalError(f"non-finite loss at step {step}; inputs dumped to {path}")
        optimizer.zero_grad()
        total.backward()
        torch.nn.utils.clip_grad_value_(model.parameters(), cfg.train.clip_value)
        optimizer.step()
        scheduler.step()
        losses.append(float(total.detach()))
        lrs.append(float(scheduler.get_last_lr()[0]))
        if (step + 1) % cfg.train.log_every == 0:
            save_checkpoint(ckpt, model, optimizer, scheduler, step + 1, cfg)
            if not quiet:
                print(
                    f"step {step + 1}/{cfg.train.steps} loss {losses[-1]:.4f} lr {lrs[-1]:.2e}"
                )
    save_checkpoint(ckpt, model, optimizer, scheduler, stop, cfg)
    save_config(cfg, os.path.join(out, "config.ini"))
    report.write_csv(
        os.path.join(out, "train_log.csv"),
        [
            {"step": i + start + 1, "loss": f"{l:.8f}", "lr": f"{r:.8e}"}
            for i, (l, r) in enumerate(zip(losses, lrs))
        ],
    )
    report.fig_loss_curve(os.path.join(out, "loss_curve.png"), losses, lrs)
    return TrainResult(
        out_dir=out,
        checkpoint=ckpt,
        losses=losses,
        lrs=lrs,
        steps=stop,
        seconds=time.time() - t0,
    )


def _resolve_model(cfg: RunConfig, model_or_ckpt) -> StereoMatcher:
    if isinstance(model_or_ckpt, StereoMatcher):
        return model_or_ckpt
    model = build_model(cfg)
    load_checkpoint(model_or_ckpt, model, cfg=cfg)
    return model


def evaluate(
    cfg: RunConfig,
    model_or_ckpt: Union[StereoMatcher, str],
    out_dir: Optional[str] = None,
    iters_list: Optional[Sequence[int]] = None,
    samples: Optional[int] = None,
    emit: bool = True,
) -> List[Dict[str, object]]:
    """Held-out metrics per refinement iteration count.

    Writes metrics.csv, metrics.json, report.txt and figures (error
    trend, colorized disparity maps, a PFM of the first prediction)
    when `emit` is true. Rows carry the config hash so results stay
    attributable.
    """
    iters_list = list(iters_list if iters_list is not None else cfg.eval.iters)
    count = samples if samples is not None else cfg.eval.samples
    model = _resolve_model(cfg, model_or_ckpt)
    model.eval()
    scenes = eval_dataset(cfg, count)
    h = config_hash(cfg)
    rows: List[Dict[str, object]] = []
    first_pred: Optional[np.ndarray] = None
    with torch.no_grad():
        for n in iters_list:
            reports: List[MetricReport] = []
            for scene in scenes:
                left, right, gt, valid = scene.to_tensors()
                out = model(
                    left.unsqueeze(0), right.unsqueeze(0), iters=n,
                    update_rule=cfg.train.update_rule,
                )
                pred = out["disp_final"][0, 0]
                mask = _loss_mask(gt, valid, cfg)
                reports.append(compute_metrics(pred, gt, mask))
                if first_pred is None and n == max(iters_list):
                    first_pred = pred.numpy().copy()
            rows.append(
                {
                    "iters": n,
                    "samples": len(scenes),
                    "epe": round(float(np.mean([r.epe for r in reports])), 6),
                    "bad3": round(float(np.mean([r.bad3 for r in reports])), 6),
                    "d1_all": round(float(np.mean([r.d1_all for r in reports])), 6),
                    "config_hash": h,
                }
            )
    if emit:
        dest = report.ensure_dir(out_dir or resolve_out_dir(cfg))
        report.write_csv(os.path.join(dest, "metrics.csv"), rows)
        report.write_json(os.path.join(dest, "metrics.json"), rows)
        report.write_flat_records(os.path.join(dest, "report.txt"), rows)
        report.fig_metric_trend(
            os.path.join(dest, "epe_vs_iterations.png"),
            [r["iters"] for r in rows],
            [r["epe"] for r in rows],
            "EPE [px]",
        )
        scene = scenes[0]
        vmax = float(max(scene.gt.max(), 1.0))
        report.save_disparity_png(os.path.join(dest, "sample_gt.png"), scene.gt, vmax)
        if first_pred is not None:
            report.save_disparity_png(os.path.join(dest, "sample_pred.png"), first_pred, vmax)
            write_pfm(os.path.join(dest, "sample_pred.pfm"), first_pred)
    return rows


def _pad_to_multiple(x: torch.Tensor, multiple: int = 16):
    h, w = x.shape[-2:]
    ph = (multiple - h % multiple) % multiple
    pw = (multiple - w % multiple) % multiple
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="replicate")
    return x, (h, w)


def infer(
    cfg: RunConfig,
    model_or_ckpt: Union[StereoMatcher, str],
    left_path: str,
    right_path: str,
    out_dir: Optional[str] = None,
    iters: Optional[int] = None,
) -> Dict[str, str]:
    """Disparity for one image pair from disk.

    Inputs of arbitrary size are replicate-padded to a multiple of 16
    and the prediction is cropped back. Writes the field as PFM plus a
    colorized PNG; repeated calls produce byte-identical files.
    """
    n = iters if iters is not None else max(cfg.eval.iters)
    model = _resolve_model(cfg, model_or_ckpt)
    model.eval()
    left = torch.from_numpy(load_image(left_path)).unsqueeze(0)
    right = torch.from_numpy(load_image(right_path)).unsqueeze(0)
    if left.shape != right.shape:
        raise ValueError("left and right images must match in size")
    left, size = _pad_to_multiple(left)
    right, _ = _pad_to_multiple(right)
    with torch.no_grad():
        out = model(left, right, iters=n, update_rule=cfg.train.update_rule)
    pred = out["disp_final"][0, 0, : size[0], : size[1]].numpy()
    dest = report.ensure_dir(out_dir or resolve_out_dir(cfg))
    paths = {
        "pfm": os.path.join(dest, "disparity.pfm"),
        "png": os.path.join(dest, "disparity.png"),
        "summary": os.path.join(dest, "summary.txt"),
    }
    write_pfm(paths["pfm"], pred)
    report.save_disparity_png(paths["png"], pred)
    with open(paths["summary"], "w", encoding="utf-8") as f:
        f.write(f"iters={n}\n")
        f.write(f"height={size[0]}\nwidth={size[1]}\n")
        f.write(f"disp_min={pred.min():.6f}\ndisp_max={pred.max():.6f}\n")
        f.write(f"disp_mean={pred.mean():.6f}\n")
        f.write(f"config_hash={config_hash(cfg)}\n")
    return paths


ABLATION_FLAGS = {
    "te": "use_time",
    "ca": "use_context_attention",
    "smish": "use_smish",
    "ffn": "use_ffn",
    "aa": "use_agent_attention",
}


def _toggle(cfg: RunConfig, flag: str) -> RunConfig:
    field_name = ABLATION_FLAGS[flag]
    current = getattr(cfg.model, field_name)
    return replace(cfg, model=replace(cfg.model, **{field_name: not current}))


def ablate(
    cfg: RunConfig,
    flags: Sequence[str] = ("te", "ca"),
    out_dir: Optional[str] = None,
    schedules: Sequence[str] = (),
    emit: bool = True,
) -> List[Dict[str, object]]:
    """Train-and-evaluate grid around a base configuration.

    One row per variant: the base config, each flag toggled away from
    its base value, and optionally each named mixing-schedule preset
    (those matter only when training in bridge mode). Every row records
    the variant's own config hash.
    """
    from .config import schedule_from_preset

    for flag in flags:
        if flag not in ABLATION_FLAGS:
            raise ConfigError(f"unknown ablation flag {flag!r}; known: {sorted(ABLATION_FLAGS)}")
    base_out = report.ensure_dir(out_dir or resolve_out_dir(cfg))
    variants: List[Tuple[str, RunConfig]] = [("base", cfg)]
    for flag in flags:
        on = getattr(cfg.model, ABLATION_FLAGS[flag])
        variants.append((f"{flag}_{'off' if on else 'on'}", _toggle(cfg, flag)))
    for name in schedules:
        variants.append(
            (f"sched_{name}", replace(cfg, schedule=schedule_from_preset(name)))
        )
    rows: List[Dict[str, object]] = []
    n_eval = max(cfg.eval.iters)
    for name, variant in variants:
        run_dir = os.path.join(base_out, name)
        result = train(variant, out_dir=run_dir)
        metrics = evaluate(
            variant, result.checkpoint, out_dir=run_dir, iters_list=[n_eval], emit=False
        )[0]
        rows.append(
            {
                "variant": name,
                "iters": n_eval,
                "epe": metrics["epe"],
                "bad3": metrics["bad3"],
                "d1_all": metrics["d1_all"],
                "train_seconds": round(result.seconds, 2),
                "config_hash": config_hash(variant),
            }
        )
    if emit:
        report.write_csv(os.path.join(base_out, "ablation.csv"), rows)
        report.write_flat_records(os.path.join(base_out, "ablation.txt"), rows)
        report.fig_ablation_bars(
            os.path.join(base_out, "ablation_epe.png"),
            [r["variant"] for r in rows],
            [r["epe"] for r in rows],
            "EPE [px]",
        )
    return rows
