"""Training loops: multi-condition diversion, few-shot adaptation, harnesses.

Every stochastic draw is stream-addressed (see rng.py): batch ``b`` comes
from ("batch", b) and the remaining per-step randomness (timesteps, noise,
dropout masks, in that order) from ("step", b). Together with the
checkpointed optimizer moments and gate state this makes an interrupted
run resume bit-exactly.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointState, load_checkpoint, save_checkpoint
from .conditions import (
    DatasetBank,
    _build_batch,
    basic_conditions,
    default_registry,
    find_condition,
    metric_encoder_sim,
    metric_ssim,
)
from .config import RunConfig, config_digest, resolve_config, resolved_text
from .errors import CheckpointError, ContractError, NumericError
from .factorized import FactorizedWeight, GatedCoefficients, masked_gradient_apply
from .gate import (
    GateState,
    InstructionEncoder,
    record_usage,
    route,
    topk_select,
    update_biases,
)
from .model import (
    ControlBranch,
    DenoiserNet,
    NoiseSchedule,
    RepaHead,
    branch_forward,
    count_parameters,
    denoiser_forward,
    diffusion_loss,
    forward_noise,
    patchify,
    repa_loss,
    sample_batch,
    total_loss,
)
from .optim import AdamW, lr_at
from .rng import stream
from .runio import MetricsWriter, export_metrics, run_lock, write_resolved_config
from .tensor import Tensor


@dataclass
class ModelBundle:
    """Everything a run owns: networks, gate, schedules, condition registry."""

    cfg: RunConfig
    den: DenoiserNet
    branch: ControlBranch
    gate: GateState
    repa: RepaHead
    sched: NoiseSchedule
    specs: list
    embeddings: list
    trainable_names: set = field(default_factory=set)

    def params(self) -> dict:
        out = {}
        for name, t in self.den.tensors().items():
            out["den." + name] = t
        for name, t in self.branch.tensors().items():
            out["br." + name] = t
        for name, t in self.gate.tensors().items():
            out["gate." + name] = t
        for name, t in self.repa.tensors().items():
            out["repa." + name] = t
        return out

    def trainable_params(self) -> dict:
        params = self.params()
        if not self.trainable_names:
            return params
        return {k: v for k, v in params.items() if k in self.trainable_names}


def _embed_all(cfg: RunConfig, specs) -> list:
    enc = InstructionEncoder(cfg.encoder_seed, cfg.embed_dim)
    return [enc.encode(s.instruction, s.condition_id) for s in specs]


def build_diversion_bundle(cfg: RunConfig, registry=None) -> ModelBundle:
    """Fresh model for multi-condition training on the basic registry."""
    specs = basic_conditions(registry)
    dcfg = cfg.denoiser_config()
    den = DenoiserNet(dcfg, cfg.seed)
    branch = ControlBranch(dcfg, cfg.seed, cfg.n_learngene, cfg.n_tailor)
    gate = GateState.init(cfg.embed_dim, cfg.n_tailor, cfg.top_k, cfg.seed,
                          bias_update_rate=cfg.gate_bias_rate)
    repa = RepaHead(dcfg, cfg.seed, cfg.encoder_seed)
    bundle = ModelBundle(cfg=cfg, den=den, branch=branch, gate=gate, repa=repa,
                         sched=NoiseSchedule.linear(dcfg), specs=specs,
                         embeddings=_embed_all(cfg, specs))
    bundle.trainable_names = set(bundle.params())
    return bundle


def _fresh_tailor_bank(fw: FactorizedWeight, cfg: RunConfig, name: str,
                       freeze_shared: bool) -> FactorizedWeight:
    """Replace the tailor block with randomly initialized components.

    New u/v columns are unit-norm random directions and sigma starts at
    zero, so the swapped-in bank leaves the composed weight untouched
    until training moves the scales.
    """
    n_t = cfg.adapt_n_tailor
    gen = stream(cfg.seed, "init", "adapt." + name)
    u = gen.standard_normal((fw.out_dim, n_t))
    u /= np.linalg.norm(u, axis=0, keepdims=True)
    v = gen.standard_normal((fw.in_dim, n_t))
    v /= np.linalg.norm(v, axis=0, keepdims=True)
    shared = (Tensor(fw.u_g.data, requires_grad=not freeze_shared),
              Tensor(fw.s_g.data, requires_grad=not freeze_shared),
              Tensor(fw.v_g.data, requires_grad=not freeze_shared))
    return FactorizedWeight(*shared,
                            Tensor(u, requires_grad=True),
                            Tensor(np.zeros(n_t), requires_grad=True),
                            Tensor(v, requires_grad=True),
                            projection_tag=fw.projection_tag,
                            layer_index=fw.layer_index)


def _adaptation_surgery(base: ModelBundle, cfg: RunConfig) -> ModelBundle:
    """Freeze the transferred model and graft fresh tailors plus a fresh
    gate output row set for a single novel condition."""
    new_spec = find_condition(cfg.adapt_condition)
    if new_spec.shift_class != "novel_high":
        raise ContractError(
            f"few-shot adaptation targets high-shift conditions; "
            f"'{new_spec.condition_id}' is {new_spec.shift_class}")
    for t in base.params().values():
        t.requires_grad = False
    dcfg = cfg.denoiser_config()
    branch = base.branch
    for li, blk in enumerate(branch.blocks):
        for key in ("fw_q", "fw_k", "fw_v", "fw_o", "fw_in", "fw_out"):
            blk[key] = _fresh_tailor_bank(blk[key], cfg, f"l{li}.{key}",
                                          freeze_shared=True)
    branch.n_tailor = cfg.adapt_n_tailor
    old_gate = base.gate
    gate = GateState(
        w1=Tensor(old_gate.w1.data, requires_grad=False),
        b1=Tensor(old_gate.b1.data, requires_grad=False),
        w2=Tensor(np.zeros((cfg.adapt_n_tailor, cfg.embed_dim)), requires_grad=True),
        b2=Tensor(np.zeros(cfg.adapt_n_tailor), requires_grad=True),
        k=cfg.adapt_top_k, bias_update_rate=cfg.gate_bias_rate)
    specs = [new_spec]
    bundle = ModelBundle(cfg=cfg, den=base.den, branch=branch, gate=gate,
                         repa=base.repa, sched=NoiseSchedule.linear(dcfg),
                         specs=specs, embeddings=_embed_all(cfg, specs))
    bundle.trainable_names = {
        name for name, t in bundle.params().items() if t.requires_grad}
    return bundle


def build_adapt_bundle(cfg: RunConfig, base_ckpt_path) -> ModelBundle:
    """Few-shot bundle: transferred parameters frozen, fresh routing path."""
    if cfg.mode != "adapt_frozen":
        raise ContractError("adaptation requires mode = adapt_frozen")
    state = load_checkpoint(base_ckpt_path)
    base_cfg = resolve_config(state.config_text)
    base = build_diversion_bundle(base_cfg)
    load_bundle_arrays(base, state)
    return _adaptation_surgery(base, cfg)


def build_scratch_bundle(cfg: RunConfig) -> ModelBundle:
    """Control arm for adaptation: identical trainable set, random frozen
    base instead of a transferred one."""
    if cfg.mode != "scratch":
        raise ContractError("build_scratch_bundle requires mode = scratch")
    base = build_diversion_bundle(cfg.replace(mode="diversion"))
    bundle = _adaptation_surgery(base, cfg.replace(mode="adapt_frozen"))
    bundle.cfg = cfg
    return bundle


# ----------------------------------------------------------------------
# checkpoint wiring
# ----------------------------------------------------------------------

def bundle_state(bundle: ModelBundle, opt: AdamW | None, step: int,
                 cond_ema: np.ndarray, cond_seen: np.ndarray,
                 extra_meta: dict | None = None) -> CheckpointState:
    cfg = bundle.cfg
    arrays = {}
    for name, t in bundle.params().items():
        arrays["param/" + name] = t.data
    if opt is not None:
        for name in opt.params:
            arrays["opt/m/" + name] = opt.m[name]
            arrays["opt/v/" + name] = opt.v[name]
        arrays["opt/t"] = np.array([opt.step_count], dtype=np.int64)
    arrays["gate/balance_bias"] = bundle.gate.balance_bias
    arrays["gate/usage"] = bundle.gate.usage_count.astype(np.int64)
    arrays["gate/batch"] = bundle.gate.batch_count.astype(np.int64)
    arrays["metrics/cond_ema"] = cond_ema
    arrays["metrics/cond_seen"] = cond_seen.astype(np.int64)
    meta = {"config_text": resolved_text(cfg),
            "condition_ids": ",".join(s.condition_id for s in bundle.specs)}
    meta.update(extra_meta or {})
    return CheckpointState(step=step, config_digest=config_digest(cfg),
                           arrays=arrays, meta=meta)


def load_bundle_arrays(bundle: ModelBundle, state: CheckpointState,
                       opt: AdamW | None = None) -> None:
    params = bundle.params()
    for name, t in params.items():
        key = "param/" + name
        if key not in state.arrays:
            raise CheckpointError(f"checkpoint missing parameter block '{key}'")
        arr = state.arrays[key]
        if arr.shape != t.data.shape:
            raise CheckpointError(
                f"block '{key}' shape {arr.shape} != expected {t.data.shape}")
        t.data = arr.copy()
    bundle.gate.balance_bias = state.arrays["gate/balance_bias"].copy()
    bundle.gate.usage_count = state.arrays["gate/usage"].copy()
    bundle.gate.batch_count = state.arrays["gate/batch"].copy()
    if opt is not None:
        for name in opt.params:
            opt.m[name] = state.arrays["opt/m/" + name].copy()
            opt.v[name] = state.arrays["opt/v/" + name].copy()
        opt.step_count = int(state.arrays["opt/t"][0])


def restore_bundle(ckpt_path) -> ModelBundle:
    """Rebuild a bundle (diversion- or adaptation-shaped) from a checkpoint."""
    state = load_checkpoint(ckpt_path)
    cfg = resolve_config(state.config_text)
    if cfg.mode in ("adapt_frozen", "scratch"):
        base = build_diversion_bundle(cfg.replace(mode="diversion"))
        bundle = _adaptation_surgery(base, cfg.replace(mode="adapt_frozen"))
        bundle.cfg = cfg
    else:
        bundle = build_diversion_bundle(cfg)
    load_bundle_arrays(bundle, state)
    return bundle


# ----------------------------------------------------------------------
# the training loop
# ----------------------------------------------------------------------

@dataclass
class RunMetrics:
    reports: list = field(default_factory=list)
    cond_ema: np.ndarray = None
    cond_seen: np.ndarray = None
    seconds_per_100: list = field(default_factory=list)


_EMA = 0.98


def _routing_rows(bundle: ModelBundle, cond_idx: np.ndarray,
                  record: bool = True):
    """Per-item tailor coefficients for a batch (None when no tailors).

    Returns (rows, active_union) where rows is a (B, n_tailor) tensor of
    unbiased coefficients, differentiable into the gate. ``record`` counts
    one routing event per item toward the balance statistics.
    """
    gate = bundle.gate
    if bundle.branch.n_tailor == 0:
        return None, set()
    unique = sorted(set(int(c) for c in cond_idx))
    g_rows, position = [], {}
    active_union: set = set()
    for ui, c in enumerate(unique):
        alpha = route(gate, bundle.embeddings[c])
        coeffs = topk_select(alpha, gate)
        if record:
            record_usage(gate, coeffs.active_set,
                         count=int((cond_idx == c).sum()))
        active_union |= set(coeffs.active_set)
        g_rows.append(T.reshape(coeffs.g, (1, gate.n_tailor)))
        position[c] = ui
    stacked = g_rows[0] if len(g_rows) == 1 else T.concat(g_rows, axis=0)
    rows = T.gather_rows(stacked, np.array([position[int(c)] for c in cond_idx]))
    return rows, active_union


def train_steps(bundle: ModelBundle, bank: DatasetBank, out_dir,
                start_step: int = 0, stop_step: int | None = None,
                opt: AdamW | None = None, metrics: RunMetrics | None = None,
                log=None) -> tuple:
    """Run optimizer steps [start_step, stop_step) and checkpoint at the end.

    Returns (checkpoint_path, RunMetrics).
    """
    cfg = bundle.cfg
    dcfg = cfg.denoiser_config()
    lr_sched = cfg.schedule()
    lam = cfg.lambda_repa
    patch = dcfg.patch_size
    stop = cfg.steps if stop_step is None else min(stop_step, cfg.steps)
    if opt is None:
        opt = AdamW(bundle.trainable_params(), lr=cfg.lr,
                    betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps,
                    weight_decay=cfg.weight_decay)
    if metrics is None:
        metrics = RunMetrics(cond_ema=np.zeros(len(bundle.specs)),
                             cond_seen=np.zeros(len(bundle.specs)))
    os.makedirs(out_dir, exist_ok=True)
    writer = MetricsWriter(out_dir, [s.condition_id for s in bundle.specs],
                           resume=start_step > 0)
    ckpt_path = os.path.join(out_dir, "checkpoint.divc")
    t_block = time.monotonic()
    try:
        for s in range(start_step, stop):
            batch = _build_batch(bank, cfg.batch_size, cfg.seed, s)
            gen = stream(cfg.seed, "step", s)
            t_idx = gen.integers(0, dcfg.timesteps, cfg.batch_size)
            eps = gen.standard_normal(batch.x.shape)
            rows, active_union = _routing_rows(bundle, batch.cond_idx)
            z_t = forward_noise(batch.x, t_idx, eps, bundle.sched)
            drop_gen = gen if cfg.dropout > 0 else None
            inj, f_cond = branch_forward(bundle.branch, dcfg,
                                         patchify(batch.x_cond, patch), t_idx,
                                         rows, cfg.dropout, drop_gen)
            eps_hat = denoiser_forward(bundle.den, dcfg, patchify(z_t, patch),
                                       t_idx, inj, cfg.dropout, drop_gen)
            eps_tok = patchify(eps, patch)
            l_diff_t = diffusion_loss(eps_tok, eps_hat)
            e_img = bundle.repa.encode(batch.x_cond)
            if lam > 0:
                l_repa_t = repa_loss(f_cond, e_img, bundle.repa)
                total_t = T.add(l_diff_t, T.mul(l_repa_t, lam))
            else:
                with T.no_grad():
                    l_repa_t = repa_loss(Tensor(f_cond.data), e_img, bundle.repa)
                total_t = l_diff_t
            report = total_loss(l_diff_t.item(), l_repa_t.item(), lam, step=s + 1)
            if not np.isfinite(report.l_total):
                snap = os.path.join(out_dir, f"nan-snapshot-step{s + 1}.divc")
                save_checkpoint(snap, bundle_state(
                    bundle, opt, s, metrics.cond_ema, metrics.cond_seen,
                    {"abort": f"non-finite loss at step {s + 1}"}))
                raise NumericError(
                    f"non-finite loss at step {s + 1}; snapshot: {snap}")

            # per-condition running loss (EMA over that condition's items)
            per_item = ((eps_tok - eps_hat.data) ** 2).mean(axis=(1, 2))
            for c in set(int(c) for c in batch.cond_idx):
                val = float(per_item[batch.cond_idx == c].mean())
                if metrics.cond_seen[c]:
                    metrics.cond_ema[c] = _EMA * metrics.cond_ema[c] + (1 - _EMA) * val
                else:
                    metrics.cond_ema[c] = val
                    metrics.cond_seen[c] = 1

            T.backward(total_t)
            if bundle.branch.n_tailor:
                for fw in bundle.branch.factorized_weights():
                    masked_gradient_apply(fw, active_union)
            opt.step(lr=lr_at(lr_sched, s))
            opt.zero_grad()
            update_biases(bundle.gate)
            metrics.reports.append(report)
            writer.write(s + 1, report.l_diff, report.l_repa, report.l_total,
                         lr_at(lr_sched, s), metrics.cond_ema)
            if (s + 1) % 100 == 0:
                metrics.seconds_per_100.append(time.monotonic() - t_block)
                t_block = time.monotonic()
                writer.flush()
                save_checkpoint(ckpt_path, bundle_state(
                    bundle, opt, s + 1, metrics.cond_ema, metrics.cond_seen))
                if log:
                    log(f"step {s + 1}/{stop} l_diff={report.l_diff:.4f} "
                        f"l_repa={report.l_repa:+.4f}")
    finally:
        writer.close()
    save_checkpoint(ckpt_path, bundle_state(bundle, opt, stop,
                                            metrics.cond_ema, metrics.cond_seen))
    export_metrics(out_dir, extra=_summary_extras(bundle, metrics))
    return ckpt_path, metrics


def _summary_extras(bundle: ModelBundle, metrics: RunMetrics) -> dict:
    params = bundle.params()
    trainable = bundle.trainable_params()
    return {
        "mode": bundle.cfg.mode,
        "config_digest": config_digest(bundle.cfg).hex(),
        "gate_usage": [int(v) for v in bundle.gate.usage_count],
        "n_parameters": count_parameters(params),
        "n_trainable": count_parameters(trainable),
        "seconds_per_100_steps": metrics.seconds_per_100,
        "condition_ids": [s.condition_id for s in bundle.specs],
    }


def train_diversion(cfg: RunConfig, out_dir, resume: str | None = None,
                    allow_config_mismatch: bool = False, log=None) -> str:
    """Algorithm: route, compose, denoise, align, update; returns ckpt path."""
    if cfg.mode != "diversion":
        raise ContractError("train_diversion requires mode = diversion")
    with run_lock(out_dir):
        write_resolved_config(out_dir, resolved_text(cfg))
        bundle = build_diversion_bundle(cfg)
        bank = DatasetBank(cfg.seed, cfg.dataset_size, bundle.specs,
                           cfg.image_size)
        start, opt, metrics = 0, None, None
        if resume is not None:
            state = load_checkpoint(resume)
            if state.config_digest != config_digest(cfg) and not allow_config_mismatch:
                raise ContractError(
                    "resume checkpoint was written under a different config; "
                    "pass --allow-config-mismatch to continue anyway")
            opt = AdamW(bundle.trainable_params(), lr=cfg.lr,
                        betas=(cfg.adam_beta1, cfg.adam_beta2),
                        eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
            load_bundle_arrays(bundle, state, opt)
            start = state.step
            metrics = RunMetrics(cond_ema=state.arrays["metrics/cond_ema"].copy(),
                                 cond_seen=state.arrays["metrics/cond_seen"].copy())
        ckpt, _ = train_steps(bundle, bank, out_dir, start_step=start,
                              opt=opt, metrics=metrics, log=log)
        return ckpt


def zero_shot_route(ckpt_path_or_bundle, instruction_text: str) -> GatedCoefficients:
    """Route a novel instruction through a trained gate; no updates."""
    bundle = ckpt_path_or_bundle
    if not isinstance(bundle, ModelBundle):
        bundle = restore_bundle(bundle)
    enc = InstructionEncoder(bundle.cfg.encoder_seed, bundle.cfg.embed_dim)
    with T.no_grad():
        alpha = route(bundle.gate, enc.encode(instruction_text))
        return topk_select(alpha, bundle.gate)


def adapt_few_shot(cfg: RunConfig, base_ckpt, out_dir, log=None) -> str:
    """Train fresh tailors on a high-shift condition; everything else frozen."""
    bundle = build_adapt_bundle(cfg, base_ckpt)
    with run_lock(out_dir):
        write_resolved_config(out_dir, resolved_text(cfg))
        bank = DatasetBank(cfg.seed, cfg.adapt_images, bundle.specs,
                           cfg.image_size, image_stream="adapt-image")
        adapted_cfg = cfg.replace(steps=cfg.adapt_steps)
        bundle.cfg = adapted_cfg
        ckpt, _ = train_steps(bundle, bank, out_dir, log=log)
        return ckpt


def train_scratch(cfg: RunConfig, out_dir, log=None) -> str:
    """Adaptation control: same trainable set, random frozen base."""
    bundle = build_scratch_bundle(cfg)
    with run_lock(out_dir):
        write_resolved_config(out_dir, resolved_text(cfg))
        bank = DatasetBank(cfg.seed, cfg.adapt_images, bundle.specs,
                           cfg.image_size, image_stream="adapt-image")
        scratch_cfg = cfg.replace(steps=cfg.adapt_steps)
        bundle.cfg = scratch_cfg
        ckpt, _ = train_steps(bundle, bank, out_dir, log=log)
        return ckpt


# ----------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------

def evaluate_bundle(bundle: ModelBundle, n_samples: int | None = None,
                    sample_images: bool = True) -> dict:
    """Held-out metrics: noise-prediction loss, aligned cosine, and (when
    ``sample_images``) SSIM / encoder similarity of generated images."""
    cfg = bundle.cfg
    dcfg = cfg.denoiser_config()
    n = cfg.eval_samples if n_samples is None else n_samples
    specs = bundle.specs
    bank = DatasetBank(cfg.seed, n, specs, cfg.image_size, image_stream="eval")
    cond_idx = np.arange(n) % len(specs)
    x = bank.images
    x_cond = np.stack([bank.condition_images(int(c))[i]
                       for i, c in enumerate(cond_idx)])
    gen = stream(cfg.seed, "eval-noise")
    t_idx = gen.integers(0, dcfg.timesteps, n)
    eps = gen.standard_normal(x.shape)
    z_t = forward_noise(x, t_idx, eps, bundle.sched)
    with T.no_grad():
        rows, _ = _routing_rows(bundle, cond_idx, record=False)
        rows_np = rows.data if rows is not None else None
        inj, f_cond = branch_forward(bundle.branch, dcfg,
                                     patchify(x_cond, dcfg.patch_size), t_idx,
                                     rows)
        eps_hat = denoiser_forward(bundle.den, dcfg,
                                   patchify(z_t, dcfg.patch_size), t_idx, inj)
        l_diff = diffusion_loss(patchify(eps, dcfg.patch_size), eps_hat).item()
        aligned_cos = -repa_loss(f_cond, bundle.repa.encode(x_cond),
                                 bundle.repa).item()
    out = {"eval_l_diff": l_diff, "eval_aligned_cosine": aligned_cos,
           "n_samples": n}
    if sample_images:
        samples = sample_batch(bundle.den, bundle.branch, dcfg, bundle.sched,
                               x_cond, rows_np, cfg.seed,
                               sample_indices=[f"eval-{i}" for i in range(n)])
        out["eval_ssim"] = float(np.mean(
            [metric_ssim(a, b) for a, b in zip(samples, x)]))
        out["eval_encoder_sim"] = float(np.mean(
            [metric_encoder_sim(bundle.repa, a, b) for a, b in zip(samples, x)]))
    return out


# ----------------------------------------------------------------------
# harnesses: ablation and alignment sweep
# ----------------------------------------------------------------------

ABLATION_ARMS = ("neither", "diversion_only", "both")


def ablation_arm_config(cfg: RunConfig, arm: str) -> RunConfig:
    if arm == "both":
        return cfg
    if arm == "diversion_only":
        return cfg.replace(lambda_repa=0.0)
    if arm == "neither":
        return cfg.replace(lambda_repa=0.0,
                           n_learngene=cfg.n_learngene + cfg.n_tailor,
                           n_tailor=0, top_k=0)
    raise ContractError(f"unknown ablation arm '{arm}'")


def audit_batch_streams(configs, n_batches: int = 3) -> bool:
    """Arms must consume identical batch sequences (same seed, same draws)."""
    baseline = None
    for cfg in configs:
        bank = DatasetBank(cfg.seed, cfg.dataset_size,
                           basic_conditions(), cfg.image_size)
        sig = []
        for b in range(n_batches):
            batch = _build_batch(bank, cfg.batch_size, cfg.seed, b)
            sig.append((batch.image_idx.tobytes(), batch.cond_idx.tobytes()))
        if baseline is None:
            baseline = sig
        elif sig != baseline:
            return False
    return True


def run_ablation(cfg: RunConfig, out_dir, eval_samples: int | None = None,
                 log=None) -> dict:
    """Train the three ablation arms under identical seeds and batches."""
    arm_cfgs = {arm: ablation_arm_config(cfg, arm) for arm in ABLATION_ARMS}
    if not audit_batch_streams(list(arm_cfgs.values())):
        raise ContractError("seed audit failed: arms see different batches")
    report = {"seed": cfg.seed, "seed_audit": "identical-batch-streams",
              "arms": {}}
    for arm, arm_cfg in arm_cfgs.items():
        arm_dir = os.path.join(out_dir, arm)
        if log:
            log(f"[ablation] training arm '{arm}'")
        with run_lock(arm_dir):
            write_resolved_config(arm_dir, resolved_text(arm_cfg))
            bundle = build_diversion_bundle(arm_cfg)
            bank = DatasetBank(arm_cfg.seed, arm_cfg.dataset_size,
                               bundle.specs, arm_cfg.image_size)
            _, metrics = train_steps(bundle, bank, arm_dir, log=log)
        tail = [r.l_diff for r in metrics.reports[-100:]]
        head = [r.l_diff for r in metrics.reports[:100]]
        arm_out = {
            "final_100_mean_l_diff": float(np.mean(tail)),
            "first_100_mean_l_diff": float(np.mean(head)),
            "config_digest": config_digest(arm_cfg).hex(),
        }
        arm_out.update(evaluate_bundle(bundle, n_samples=eval_samples))
        report["arms"][arm] = arm_out
    return report


def sweep_repa(cfg: RunConfig, depths, lambdas, out_dir, log=None) -> dict:
    """Short run per (alignment depth, weight) cell; marks the argmin cell.

    The best cell is reported as observed at this scale and carries no
    claim beyond it.
    """
    depths, lambdas = list(depths), list(lambdas)
    if not depths or not lambdas:
        raise ContractError("sweep grid must be non-empty")
    report = {"depths": depths, "lambdas": lambdas, "cells": {}}
    best, best_key = None, None
    for d in depths:
        for lam in lambdas:
            cell_cfg = cfg.replace(repa_layer=d, lambda_repa=lam)
            cell_dir = os.path.join(out_dir, f"depth{d}_lambda{lam}")
            if log:
                log(f"[sweep] depth={d} lambda={lam}")
            with run_lock(cell_dir):
                write_resolved_config(cell_dir, resolved_text(cell_cfg))
                bundle = build_diversion_bundle(cell_cfg)
                bank = DatasetBank(cell_cfg.seed, cell_cfg.dataset_size,
                                   bundle.specs, cell_cfg.image_size)
                _, metrics = train_steps(bundle, bank, cell_dir, log=log)
            final = float(np.mean([r.l_diff for r in metrics.reports[-100:]]))
            ev = evaluate_bundle(bundle, n_samples=min(32, cfg.eval_samples),
                                 sample_images=False)
            key = f"depth={d},lambda={lam}"
            report["cells"][key] = {
                "final_100_mean_l_diff": final,
                "eval_aligned_cosine": ev["eval_aligned_cosine"],
                "config_digest": config_digest(cell_cfg).hex(),
            }
            if best is None or final < best:
                best, best_key = final, key
    report["argmin_cell"] = best_key
    report["note"] = ("argmin is what this desk-scale grid observed; "
                      "it is not claimed to transfer to other scales")
    return report
