"""Stage runners for the three training phases, plus checkpoint/resume plumbing."""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor, backward
from .backbone import BackboneConfig, ToyBackbone
from .checkpoint import assign_parameters, load_checkpoint, save_checkpoint
from .encoder import DualStreamEncoder, EncoderConfig
from .errors import ConfigError, DataError, MontageError
from .losses import ReconstructionHeads, loss_cpt, loss_dsha, loss_ntp, loss_sft
from .optim import AdamW, clip_global_norm, cosine_schedule
from .profiler import (
    HttpClient,
    LlmClient,
    PhysicalFeatures,
    ProfileResult,
    StubClient,
    TaskMeta,
    build_prompt,
    extract_features,
    generate_profile,
    verbalize,
)
from .quantizer import QuantizerConfig, TokenSequence, VectorQuantizer, codebook_health
from .refiner import HashedTextEmbedder, RefinerConfig, SemanticRefiner
from .sequences import HybridSequence, VocabSpec, WhitespaceTokenizer, assemble_sequence
from .signal_io import Recording, dft_target, patch
from .synth import load_corpus

CSV_COLUMNS = ("step", "loss_total", "loss_text", "loss_eeg", "loss_orth", "lr")


# ---------------------------------------------------------------------------
# model bundle
# ---------------------------------------------------------------------------

@dataclass
class PipelineModel:
    """Every trainable stage of the pipeline plus its shared vocabulary."""

    cfg: dict
    vocab: VocabSpec
    encoder: DualStreamEncoder
    recon: ReconstructionHeads
    quantizer: VectorQuantizer
    refiner: SemanticRefiner
    backbone: ToyBackbone
    tokenizer: WhitespaceTokenizer
    embedder: HashedTextEmbedder

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for prefix, mod in (
            ("encoder", self.encoder),
            ("recon", self.recon),
            ("quant", self.quantizer),
            ("refiner", self.refiner),
            ("backbone", self.backbone),
        ):
            out.update(mod.named_parameters(prefix))
        return out

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if v.requires_grad}

    def tokenize_recording(self, rec: Recording) -> tuple[TokenSequence, np.ndarray]:
        """Patch -> encode -> quantize one recording (no gradients recorded)."""
        montage = self.encoder.hierarchy.montage
        if rec.channels != montage.labels:
            raise MontageError(
                f"container channels {list(rec.channels)[:4]}... do not match "
                f"the checkpoint montage ({montage.n_channels} channels)"
            )
        ps = patch(rec, self.cfg["data"]["patch_len"])
        enc = self.encoder(ps)
        tokens, _, _, z_q = self.quantizer(enc.h_eeg)
        return tokens, z_q.data.copy()


def build_model(cfg: dict) -> PipelineModel:
    """Construct the full bundle from a resolved config, seeded by cfg['seed']."""
    rng = np.random.default_rng(cfg["seed"])
    enc_cfg = EncoderConfig(
        embed_dim=cfg["encoder"]["embed_dim"],
        n_heads=cfg["encoder"]["n_heads"],
        ffn_mult=cfg["encoder"]["ffn_mult"],
        patch_len=cfg["data"]["patch_len"],
        max_patches=cfg["encoder"]["max_patches"],
        montage=cfg["data"]["montage"],
    )
    q_cfg = QuantizerConfig(
        num_codes=cfg["quantizer"]["num_codes"],
        code_dim=cfg["quantizer"]["code_dim"],
        beta=cfg["quantizer"]["beta"],
        kmeans_warm_start=cfg["quantizer"]["kmeans_warm_start"],
        revival_epochs=cfg["quantizer"]["revival_epochs"],
    )
    # the refiner attends over codebook rows and its summary rows feed the
    # backbone's continuous bridge, so both widths equal the code width
    ref_cfg = RefinerConfig(
        n_experts=cfg["refiner"]["n_experts"],
        embed_dim=q_cfg.code_dim,
        n_heads=cfg["refiner"]["n_heads"],
        ffn_mult=cfg["refiner"]["ffn_mult"],
    )
    vocab = VocabSpec(v_text=cfg["backbone"]["v_text"], n_codes=q_cfg.num_codes)
    bb_cfg = BackboneConfig(
        vocab=vocab,
        n_layers=cfg["backbone"]["n_layers"],
        embed_dim=cfg["backbone"]["embed_dim"],
        n_heads=cfg["backbone"]["n_heads"],
        ffn_mult=cfg["backbone"]["ffn_mult"],
        max_len=cfg["backbone"]["max_len"],
        sem_dim=q_cfg.code_dim,
        tied_head=cfg["backbone"]["tied_head"],
    )
    encoder = DualStreamEncoder(enc_cfg, rng)
    recon = ReconstructionHeads(enc_cfg.embed_dim, cfg["data"]["patch_len"], rng)
    quantizer = VectorQuantizer(q_cfg, enc_cfg.embed_dim, rng)
    refiner = SemanticRefiner(ref_cfg, rng)
    backbone = ToyBackbone(bb_cfg, rng)
    return PipelineModel(
        cfg=cfg,
        vocab=vocab,
        encoder=encoder,
        recon=recon,
        quantizer=quantizer,
        refiner=refiner,
        backbone=backbone,
        tokenizer=WhitespaceTokenizer(vocab.v_text),
        embedder=HashedTextEmbedder(q_cfg.code_dim),
    )


def load_model(checkpoint_path: str | Path) -> tuple[PipelineModel, dict]:
    """Rebuild a model bundle from a stage checkpoint."""
    arrays, meta = load_checkpoint(checkpoint_path)
    if "config" not in meta or "stage" not in meta:
        raise DataError(f"checkpoint {checkpoint_path} lacks stage/config metadata")
    model = build_model(meta["config"])
    if meta["stage"] in ("cpt", "sft"):
        lora = meta["config"]["lora"]
        model.backbone.apply_lora(lora["rank"], lora["alpha"], np.random.default_rng(0))
    assign_parameters(model.named_parameters(), arrays, strict=True)
    model.quantizer._warmed = True
    return model, meta


# ---------------------------------------------------------------------------
# profiles and prepared sequences
# ---------------------------------------------------------------------------

def make_llm_client(llm_cfg: dict) -> LlmClient:
    if llm_cfg["mode"] == "stub":
        return StubClient()
    return HttpClient(
        endpoint=llm_cfg["endpoint"],
        model=llm_cfg["model"],
        token_env=llm_cfg["token_env"],
    )


def profile_recording(
    rec: Recording,
    model: PipelineModel,
    sample_name: str,
    client: LlmClient,
) -> tuple[PhysicalFeatures, str, ProfileResult]:
    """Deterministic features -> label-free prompt -> structured profile."""
    data_cfg = model.cfg["data"]
    features = extract_features(rec, model.encoder.hierarchy)
    meta = TaskMeta(
        sample_name=sample_name,
        dataset_name=data_cfg["dataset_name"],
        task_logic=data_cfg["task_description"],
        num_channels=rec.n_channels,
        num_samples=rec.n_samples,
    )
    prompt = build_prompt(
        meta, verbalize(features), label_vocabulary=tuple(data_cfg["classes"])
    )
    return features, prompt, generate_profile(prompt, client)


@dataclass
class PreparedSequence:
    """One sample's frozen-stage material for the language-model stages."""

    name: str
    label: str | None
    seq: HybridSequence
    h_text: np.ndarray
    z_q: np.ndarray


def prepare_sequences(
    model: PipelineModel,
    corpus: list[tuple[str, Recording, str | None]],
    with_answer: bool,
) -> list[PreparedSequence]:
    """Tokenize, profile, and assemble every sample once (frozen-stage work)."""
    cfg = model.cfg
    client = make_llm_client(cfg["llm"])
    classes = list(cfg["data"]["classes"])
    model.tokenizer.ensure_distinct(classes)
    instr_ids = model.tokenizer.encode(cfg["data"]["instruction"]) if with_answer else None
    sem_slot = np.zeros((model.refiner.cfg.n_experts, model.refiner.cfg.embed_dim))
    out = []
    for name, rec, label in corpus:
        tokens, z_q = model.tokenize_recording(rec)
        _, _, result = profile_recording(rec, model, name, client)
        text = result.profile.flat_text()
        answer_ids = None
        if with_answer:
            if label is None:
                raise DataError(f"sample {name!r} has no label for supervised training")
            if label not in classes:
                raise DataError(f"label {label!r} of sample {name!r} not in configured classes")
            answer_ids = model.tokenizer.encode(label)
        seq = assemble_sequence(
            model.tokenizer.encode(text),
            sem_slot,
            tokens.indices,
            model.vocab,
            instruction_ids=instr_ids,
            answer_ids=answer_ids,
        )
        out.append(
            PreparedSequence(
                name=name,
                label=label,
                seq=seq,
                h_text=model.embedder.embed(text),
                z_q=z_q,
            )
        )
    return out


# ---------------------------------------------------------------------------
# run-directory bookkeeping
# ---------------------------------------------------------------------------

class MetricsLogger:
    """Append-only per-step CSV with round-trip-exact float columns."""

    def __init__(self, path: str | Path, append: bool = False):
        self.path = Path(path)
        fresh = not (append and self.path.exists())
        self._fh = open(self.path, "w" if fresh else "a", newline="")
        self._writer = csv.writer(self._fh)
        if fresh:
            self._writer.writerow(CSV_COLUMNS)
            self._fh.flush()

    def log(self, step: int, total: float, text: float, eeg: float, orth: float, lr: float):
        row = [step] + [repr(float(v)) for v in (total, text, eeg, orth, lr)]
        self._writer.writerow(row)
        self._fh.flush()

    def close(self):
        self._fh.close()


def prepare_run_dir(out_dir: str | Path, cfg: dict) -> Path:
    run = Path(out_dir)
    (run / "checkpoints").mkdir(parents=True, exist_ok=True)
    (run / "artifacts").mkdir(parents=True, exist_ok=True)
    (run / "config.json").write_text(json.dumps(cfg, indent=2))
    return run


def save_stage_checkpoint(
    run_dir: Path, model: PipelineModel, opt: AdamW, stage: str, epoch: int, step: int, extra: dict
) -> Path:
    arrays = {name: t.data for name, t in model.named_parameters().items()}
    state = opt.export_state()
    for pname, arr in state["m"].items():
        arrays[f"opt.m/{pname}"] = arr
    for pname, arr in state["v"].items():
        arrays[f"opt.v/{pname}"] = arr
    meta = {
        "stage": stage,
        "epoch": epoch,
        "step": step,
        "opt_step": state["step"],
        "config": model.cfg,
    }
    meta.update(extra)
    path = run_dir / "checkpoints" / f"epoch_{epoch:04d}"
    save_checkpoint(path, arrays, meta)
    return path


def find_latest_checkpoint(run_dir: str | Path) -> tuple[Path, dict] | None:
    """Newest complete epoch checkpoint under run_dir/checkpoints, if any."""
    ckpt_root = Path(run_dir) / "checkpoints"
    if not ckpt_root.is_dir():
        return None
    best: tuple[int, Path] | None = None
    for entry in ckpt_root.iterdir():
        m = re.fullmatch(r"epoch_(\d+)", entry.name)
        if m and (entry / "manifest.json").is_file():
            idx = int(m.group(1))
            if best is None or idx > best[0]:
                best = (idx, entry)
    if best is None:
        return None
    _, meta = load_checkpoint(best[1])
    return best[1], meta


def _restore_optimizer(opt: AdamW, arrays: dict[str, np.ndarray], opt_step: int) -> None:
    opt.load_state(
        {
            "step": opt_step,
            "m": {k: arrays[f"opt.m/{k}"] for k in opt.params if f"opt.m/{k}" in arrays},
            "v": {k: arrays[f"opt.v/{k}"] for k in opt.params if f"opt.v/{k}" in arrays},
        }
    )


def _write_summary(run_dir: Path, summary: dict) -> None:
    (run_dir / "artifacts" / "summary.json").write_text(json.dumps(summary, indent=2))


def _named_grads(trainable: dict[str, Tensor], grads: dict) -> dict[str, np.ndarray]:
    return {k: grads[v] for k, v in trainable.items()}


# ---------------------------------------------------------------------------
# stage 1: reconstruction + quantization
# ---------------------------------------------------------------------------

def run_vq_stage(cfg: dict, run_dir: str | Path, resume: bool = False) -> dict:
    """Train encoder, reconstruction heads and codebook on raw containers."""
    run = prepare_run_dir(run_dir, cfg)
    corpus = load_corpus(cfg["data"]["train_dir"])
    model = build_model(cfg)
    model.refiner.freeze()
    model.backbone.freeze()

    samples = []
    for _, rec, _ in corpus:
        ps = patch(rec, cfg["data"]["patch_len"])
        c, p, w = ps.data.shape
        samples.append(
            (
                ps.data,
                ps.data.reshape(c * p, w),
                dft_target(ps).magnitudes.reshape(c * p, w // 2 + 1),
            )
        )

    start_epoch, step = 0, 0
    health: dict = {}
    latest = find_latest_checkpoint(run) if resume else None
    trainable = model.trainable_parameters()
    opt_cfg = cfg["optimizer"]
    opt = AdamW(
        trainable,
        lr=opt_cfg["lr"],
        betas=tuple(opt_cfg["betas"]),
        eps=opt_cfg["eps"],
        weight_decay=opt_cfg["weight_decay"],
        lr_scales={n: opt_cfg["recon_lr_scale"] for n in trainable if n.startswith("recon.")},
    )
    epoch_avgs: list[float] = []
    if latest is not None:
        path, meta = latest
        arrays, _ = load_checkpoint(path)
        assign_parameters(model.named_parameters(), arrays, strict=True)
        model.quantizer._warmed = True
        _restore_optimizer(opt, arrays, meta["opt_step"])
        start_epoch, step = meta["epoch"] + 1, meta["step"]
        epoch_avgs = list(meta.get("epoch_avg_loss", []))
        health = meta.get("codebook_health", {})
    elif cfg["quantizer"]["kmeans_warm_start"]:
        rows = []
        for patches, _, _ in samples:
            enc = model.encoder(patches)
            c, p, e = enc.h_eeg.shape
            rows.append(model.quantizer.down(ad.reshape(enc.h_eeg, (c * p, e))).data)
        model.quantizer.warm_start(np.concatenate(rows), np.random.default_rng(cfg["seed"]))

    logger = MetricsLogger(run / "metrics.csv", append=latest is not None)
    total_steps = cfg["train"]["epochs"] * len(samples)
    beta = cfg["quantizer"]["beta"]
    try:
        for epoch in range(start_epoch, cfg["train"]["epochs"]):
            rng_e = np.random.default_rng([cfg["seed"], epoch])
            order = rng_e.permutation(len(samples))
            epoch_sum, pool = 0.0, []
            for i in order:
                patches, x_rows, f_rows = samples[i]
                with Graph():
                    enc = model.encoder(patches)
                    _, z_up, h_down, z_q = model.quantizer(enc.h_eeg)
                    x_hat, f_hat = model.recon(z_up)
                    loss = loss_dsha(x_rows, x_hat, f_rows, f_hat, h_down, z_q, beta)
                    grads = backward(loss, wrt=list(trainable.values()))
                named = clip_global_norm(_named_grads(trainable, grads), opt_cfg["clip_norm"])
                lr_t = cosine_schedule(
                    step,
                    total_steps,
                    opt_cfg["lr"],
                    cfg["schedule"]["warmup_steps"],
                    cfg["schedule"]["min_lr"],
                )
                opt.step(named, lr=lr_t)
                step += 1
                lt = float(loss.data)
                logger.log(step, lt, 0.0, lt, 0.0, lr_t)
                epoch_sum += lt
                pool.append(h_down.data)
            health = codebook_health(model.quantizer.epoch_counts.copy())
            model.quantizer.end_epoch(np.concatenate(pool), rng_e)
            epoch_avgs.append(epoch_sum / len(samples))
            save_stage_checkpoint(
                run, model, opt, "vq", epoch, step,
                {"epoch_avg_loss": epoch_avgs, "codebook_health": health},
            )
    finally:
        logger.close()
    summary = {
        "stage": "vq",
        "epochs": cfg["train"]["epochs"],
        "steps": step,
        "epoch_avg_loss": epoch_avgs,
        "final_over_first": epoch_avgs[-1] / epoch_avgs[0] if epoch_avgs[0] else 0.0,
        "codebook_health": health,
    }
    _write_summary(run, summary)
    return summary


# ---------------------------------------------------------------------------
# stage 2: continued pretraining over hybrid sequences
# ---------------------------------------------------------------------------

def _cpt_structure(model: PipelineModel, rng: np.random.Generator) -> None:
    """Freeze the signal stages, adapt the backbone, open the expansion set."""
    model.encoder.freeze()
    model.recon.freeze()
    model.quantizer.freeze()
    lora = model.cfg["lora"]
    model.backbone.apply_lora(lora["rank"], lora["alpha"], rng)
    for tensor in model.backbone.expansion_parameters().values():
        tensor.requires_grad = True
    model.refiner.unfreeze()


def run_cpt_stage(cfg: dict, run_dir: str | Path, resume: bool = False) -> dict:
    """Next-token pretraining with the orthogonality penalty on frozen tokens."""
    run = prepare_run_dir(run_dir, cfg)
    corpus = load_corpus(cfg["data"]["train_dir"])
    model = build_model(cfg)
    lora_rng = np.random.default_rng([cfg["seed"], 7])

    latest = find_latest_checkpoint(run) if resume else None
    start_epoch, step = 0, 0
    epoch_avgs: list[dict] = []
    if latest is not None:
        path, meta = latest
        arrays, _ = load_checkpoint(path)
        _cpt_structure(model, lora_rng)
        assign_parameters(model.named_parameters(), arrays, strict=True)
        start_epoch, step = meta["epoch"] + 1, meta["step"]
        epoch_avgs = list(meta.get("epoch_avg_loss", []))
    else:
        init_from = cfg["train"]["init_from"]
        if not init_from:
            raise ConfigError("cpt stage needs train.init_from pointing at a vq checkpoint")
        arrays, init_meta = load_checkpoint(init_from)
        if init_meta.get("stage") != "vq":
            raise ConfigError(
                f"cpt stage must start from a vq checkpoint, got stage "
                f"{init_meta.get('stage')!r}"
            )
        assign_parameters(model.named_parameters(), arrays, strict=True)
        _cpt_structure(model, lora_rng)
    model.quantizer._warmed = True

    prepared = prepare_sequences(model, corpus, with_answer=False)
    trainable = model.trainable_parameters()
    opt_cfg = cfg["optimizer"]
    opt = AdamW(
        trainable,
        lr=opt_cfg["lr"],
        betas=tuple(opt_cfg["betas"]),
        eps=opt_cfg["eps"],
        weight_decay=opt_cfg["weight_decay"],
    )
    if latest is not None:
        _restore_optimizer(opt, arrays, meta["opt_step"])

    logger = MetricsLogger(run / "metrics.csv", append=latest is not None)
    total_steps = cfg["train"]["epochs"] * len(prepared)
    lam = cfg["train"]["lambda_orth"]
    try:
        for epoch in range(start_epoch, cfg["train"]["epochs"]):
            order = np.random.default_rng([cfg["seed"], epoch]).permutation(len(prepared))
            sums = {"total": 0.0, "text": 0.0, "eeg": 0.0, "orth": 0.0}
            for i in order:
                item = prepared[i]
                with Graph():
                    experts = model.refiner(item.h_text, item.z_q)
                    text_l, eeg_l = loss_ntp(item.seq, model.backbone, sem=experts.s_sem)
                    orth = model.refiner.orth_loss()
                    total = loss_cpt(text_l, eeg_l, orth, lam)
                    grads = backward(total, wrt=list(trainable.values()))
                named = clip_global_norm(_named_grads(trainable, grads), opt_cfg["clip_norm"])
                lr_t = cosine_schedule(
                    step,
                    total_steps,
                    opt_cfg["lr"],
                    cfg["schedule"]["warmup_steps"],
                    cfg["schedule"]["min_lr"],
                )
                opt.step(named, lr=lr_t)
                step += 1
                vals = (float(total.data), float(text_l.data), float(eeg_l.data), float(orth.data))
                logger.log(step, *vals, lr_t)
                for key, v in zip(("total", "text", "eeg", "orth"), vals):
                    sums[key] += v
            epoch_avgs.append({k: v / len(prepared) for k, v in sums.items()})
            save_stage_checkpoint(
                run, model, opt, "cpt", epoch, step, {"epoch_avg_loss": epoch_avgs}
            )
    finally:
        logger.close()
    summary = {
        "stage": "cpt",
        "epochs": cfg["train"]["epochs"],
        "steps": step,
        "epoch_avg_loss": epoch_avgs,
        "uniform_eeg_nll": float(np.log(cfg["quantizer"]["num_codes"])),
    }
    _write_summary(run, summary)
    return summary


# ---------------------------------------------------------------------------
# stage 3: decoupled supervised fine-tuning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainingPlan:
    """Which parameter groups train at which learning rate; the rest freeze."""

    group_lrs: dict[str, float]
    group_params: dict[str, tuple[str, ...]]
    frozen: tuple[str, ...] = field(repr=False)

    def trainable(self, model: PipelineModel) -> dict[str, Tensor]:
        named = model.named_parameters()
        return {n: named[n] for names in self.group_params.values() for n in names}

    def lr_scales(self) -> dict[str, float]:
        base = self.group_lrs["adapter"]
        return {
            name: lr / base
            for group, lr in self.group_lrs.items()
            for name in self.group_params[group]
            if lr != base
        }


def decoupled_finetune_setup(
    model: PipelineModel,
    base_lr: float,
    rng: np.random.Generator,
    merge_previous: bool = True,
) -> TrainingPlan:
    """Fold the old adapter, freeze everything, then open a fresh adapter at
    `base_lr` and the refiner at its configured fraction of it."""
    if merge_previous:
        model.backbone.merge_adapters()
    for mod in (model.encoder, model.recon, model.quantizer, model.refiner):
        mod.freeze()
    lora = model.cfg["lora"]
    model.backbone.apply_lora(lora["rank"], lora["alpha"], rng)
    model.refiner.unfreeze()
    named = model.named_parameters()
    adapter = tuple(n for n, t in named.items() if "lora_a" in n or "lora_b" in n)
    refiner = tuple(n for n in named if n.startswith("refiner."))
    frozen = tuple(n for n in named if n not in adapter and n not in refiner)
    return TrainingPlan(
        group_lrs={"adapter": base_lr, "refiner": model.cfg["train"]["star_lr_scale"] * base_lr},
        group_params={"adapter": adapter, "refiner": refiner},
        frozen=frozen,
    )


def balanced_order(
    labels: list[str], rng: np.random.Generator, balance: bool
) -> np.ndarray:
    """Epoch visit order: inverse-class-frequency resampling or a permutation."""
    n = len(labels)
    if not balance:
        return rng.permutation(n)
    uniques, counts = np.unique(labels, return_counts=True)
    freq = dict(zip(uniques.tolist(), counts.tolist()))
    weights = np.array([1.0 / freq[lab] for lab in labels])
    return rng.choice(n, size=n, replace=True, p=weights / weights.sum())


def run_sft_stage(cfg: dict, run_dir: str | Path, resume: bool = False) -> dict:
    """Answer-only fine-tuning with a fresh adapter and a slow refiner."""
    run = prepare_run_dir(run_dir, cfg)
    corpus = load_corpus(cfg["data"]["train_dir"], require_labels=True)
    model = build_model(cfg)
    lora_rng = np.random.default_rng([cfg["seed"], 11])
    base_lr = cfg["optimizer"]["lr"]

    latest = find_latest_checkpoint(run) if resume else None
    start_epoch, step = 0, 0
    epoch_avgs: list[float] = []
    if latest is not None:
        path, meta = latest
        arrays, _ = load_checkpoint(path)
        plan = decoupled_finetune_setup(model, base_lr, lora_rng, merge_previous=False)
        assign_parameters(model.named_parameters(), arrays, strict=True)
        start_epoch, step = meta["epoch"] + 1, meta["step"]
        epoch_avgs = list(meta.get("epoch_avg_loss", []))
    else:
        init_from = cfg["train"]["init_from"]
        if not init_from:
            raise ConfigError("sft stage needs train.init_from pointing at a cpt checkpoint")
        arrays, init_meta = load_checkpoint(init_from)
        if init_meta.get("stage") != "cpt":
            raise ConfigError(
                f"sft stage must start from a cpt checkpoint, got stage "
                f"{init_meta.get('stage')!r}"
            )
        lora = cfg["lora"]
        model.backbone.apply_lora(lora["rank"], lora["alpha"], np.random.default_rng(0))
        assign_parameters(model.named_parameters(), arrays, strict=True)
        plan = decoupled_finetune_setup(model, base_lr, lora_rng, merge_previous=True)
    model.quantizer._warmed = True

    prepared = prepare_sequences(model, corpus, with_answer=True)
    trainable = plan.trainable(model)
    opt_cfg = cfg["optimizer"]
    opt = AdamW(
        trainable,
        lr=base_lr,
        betas=tuple(opt_cfg["betas"]),
        eps=opt_cfg["eps"],
        weight_decay=opt_cfg["weight_decay"],
        lr_scales=plan.lr_scales(),
    )
    if latest is not None:
        _restore_optimizer(opt, arrays, meta["opt_step"])

    logger = MetricsLogger(run / "metrics.csv", append=latest is not None)
    total_steps = cfg["train"]["epochs"] * len(prepared)
    labels = [item.label for item in prepared]
    try:
        for epoch in range(start_epoch, cfg["train"]["epochs"]):
            order = balanced_order(
                labels,
                np.random.default_rng([cfg["seed"], epoch]),
                cfg["train"]["class_balancing"],
            )
            epoch_sum = 0.0
            for i in order:
                item = prepared[i]
                with Graph():
                    experts = model.refiner(item.h_text, item.z_q)
                    loss = loss_sft(item.seq, model.backbone, sem=experts.s_sem)
                    grads = backward(loss, wrt=list(trainable.values()))
                named = clip_global_norm(_named_grads(trainable, grads), opt_cfg["clip_norm"])
                lr_t = cosine_schedule(
                    step,
                    total_steps,
                    base_lr,
                    cfg["schedule"]["warmup_steps"],
                    cfg["schedule"]["min_lr"],
                )
                opt.step(named, lr=lr_t)
                step += 1
                lt = float(loss.data)
                logger.log(step, lt, lt, 0.0, 0.0, lr_t)
                epoch_sum += lt
            epoch_avgs.append(epoch_sum / len(order))
            save_stage_checkpoint(
                run, model, opt, "sft", epoch, step,
                {
                    "epoch_avg_loss": epoch_avgs,
                    "plan": {k: v for k, v in plan.group_lrs.items()},
                },
            )
    finally:
        logger.close()
    summary = {
        "stage": "sft",
        "epochs": cfg["train"]["epochs"],
        "steps": step,
        "epoch_avg_loss": epoch_avgs,
        "plan": plan.group_lrs,
    }
    _write_summary(run, summary)
    return summary


STAGE_RUNNERS = {"vq": run_vq_stage, "cpt": run_cpt_stage, "sft": run_sft_stage}


def run_stage(cfg: dict, run_dir: str | Path, resume: bool = False) -> dict:
    """Dispatch to the configured stage runner."""
    return STAGE_RUNNERS[cfg["stage"]](cfg, run_dir, resume=resume)
