"""Stage runners: model wiring, metrics, checkpoints, and frozen-set contracts."""

from __future__ import annotations

import copy
import csv

import numpy as np
import pytest

from eeglm.checkpoint import load_checkpoint, save_checkpoint
from eeglm.config import resolve_config
from eeglm.errors import ConfigError, DataError, MontageError
from eeglm.optim import AdamW
from eeglm.signal_io import Recording
from eeglm.synth import make_dataset, load_corpus
from eeglm.training import (
    CSV_COLUMNS,
    MetricsLogger,
    STAGE_RUNNERS,
    _cpt_structure,
    balanced_order,
    build_model,
    decoupled_finetune_setup,
    find_latest_checkpoint,
    load_model,
    prepare_sequences,
    run_cpt_stage,
    run_sft_stage,
    run_vq_stage,
)

TOY = {
    "data": {"montage": "synthetic-2", "classes": ["class-a", "class-b"]},
    "encoder": {"embed_dim": 8, "ffn_mult": 2, "max_patches": 8},
    "quantizer": {"num_codes": 8, "code_dim": 4},
    "refiner": {"n_experts": 2},
    "backbone": {
        "v_text": 64,
        "n_layers": 1,
        "embed_dim": 16,
        "n_heads": 2,
        "ffn_mult": 2,
        "max_len": 192,
    },
    "optimizer": {"lr": 3e-3},
    "schedule": {"warmup_steps": 2},
    "train": {"epochs": 2},
}


def toy_cfg(data_dir, **sections):
    over = copy.deepcopy(TOY)
    over["data"]["train_dir"] = str(data_dir)
    for sec, patch in sections.items():
        over.setdefault(sec, {}).update(patch)
    return resolve_config(None, [over])


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    make_dataset(
        root, n_per_class=2, classes=("class-a", "class-b"),
        montage="synthetic-2", fs=200.0, seconds=2.0, seed=0,
    )
    return root


@pytest.fixture(scope="module")
def chain(tmp_path_factory, data_dir):
    """One vq -> cpt -> sft chain shared by the read-only assertions below."""
    root = tmp_path_factory.mktemp("runs")
    cfg_vq = toy_cfg(data_dir)
    run_vq_stage(cfg_vq, root / "vq")
    cfg_cpt = toy_cfg(data_dir)
    cfg_cpt["stage"] = "cpt"
    cfg_cpt["train"]["init_from"] = str(root / "vq" / "checkpoints" / "epoch_0001")
    run_cpt_stage(cfg_cpt, root / "cpt")
    cfg_sft = toy_cfg(data_dir)
    cfg_sft["stage"] = "sft"
    cfg_sft["train"]["init_from"] = str(root / "cpt" / "checkpoints" / "epoch_0001")
    run_sft_stage(cfg_sft, root / "sft")
    return root, cfg_vq, cfg_cpt, cfg_sft


def read_metrics(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    return rows[0], [[float(v) for v in row] for row in rows[1:]]


# -- model wiring -----------------------------------------------------------


def test_build_model_ties_bridge_dims(data_dir):
    model = build_model(toy_cfg(data_dir))
    code_dim = model.cfg["quantizer"]["code_dim"]
    assert model.refiner.cfg.embed_dim == code_dim
    assert model.backbone.cfg.sem_dim == code_dim
    assert model.embedder.embed_dim == code_dim
    assert model.vocab.v_text == 64
    assert model.vocab.n_codes == 8


def test_tokenize_recording_rejects_foreign_montage(data_dir):
    model = build_model(toy_cfg(data_dir))
    rec = Recording(channels=("A", "B"), fs=200.0, data=np.zeros((2, 400)))
    with pytest.raises(MontageError, match="do not match"):
        model.tokenize_recording(rec)


def test_prepare_sequences_supervised(data_dir):
    model = build_model(toy_cfg(data_dir))
    corpus = load_corpus(data_dir, require_labels=True)
    prep = prepare_sequences(model, corpus, with_answer=True)
    assert [p.name for p in prep] == [f"sample_{i:04d}" for i in range(4)]
    for item in prep:
        s = item.seq.spans
        assert set(s) == {"text", "sem", "eeg", "instr", "answer"}
        assert s["sem"][1] - s["sem"][0] == 2  # one slot per expert
        assert s["eeg"][1] - s["eeg"][0] == 4  # 2 channels x 2 patches
        answer = item.seq.ids[s["answer"][0]:s["answer"][1]].tolist()
        assert answer == model.tokenizer.encode(item.label).tolist()
        assert item.h_text.shape[1] == 4
        assert item.z_q.shape == (4, 4)


def test_prepare_sequences_unsupervised_has_no_answer(data_dir):
    model = build_model(toy_cfg(data_dir))
    corpus = load_corpus(data_dir)
    prep = prepare_sequences(model, corpus, with_answer=False)
    assert set(prep[0].seq.spans) == {"text", "sem", "eeg"}


def test_prepare_sequences_label_errors(data_dir):
    model = build_model(toy_cfg(data_dir))
    corpus = load_corpus(data_dir, require_labels=True)
    nameless = [(corpus[0][0], corpus[0][1], None)]
    with pytest.raises(DataError, match="no label"):
        prepare_sequences(model, nameless, with_answer=True)
    foreign = [(corpus[0][0], corpus[0][1], "class-z")]
    with pytest.raises(DataError, match="not in configured classes"):
        prepare_sequences(model, foreign, with_answer=True)


# -- metrics logger ---------------------------------------------------------


def test_metrics_logger_round_trip_exact(tmp_path):
    path = tmp_path / "metrics.csv"
    values = (1.0 / 3.0, 1e-17, 123456.789, 0.1 + 0.2, 2.5e-4)
    logger = MetricsLogger(path)
    logger.log(1, *values)
    logger.close()
    header, rows = read_metrics(path)
    assert header == list(CSV_COLUMNS)
    assert rows[0][0] == 1
    assert tuple(rows[0][1:]) == values  # repr round-trips doubles exactly


def test_metrics_logger_append_keeps_single_header(tmp_path):
    path = tmp_path / "metrics.csv"
    logger = MetricsLogger(path)
    logger.log(1, 1.0, 0.0, 1.0, 0.0, 1e-3)
    logger.close()
    logger = MetricsLogger(path, append=True)
    logger.log(2, 0.5, 0.0, 0.5, 0.0, 1e-3)
    logger.close()
    header, rows = read_metrics(path)
    assert header == list(CSV_COLUMNS)
    assert [int(r[0]) for r in rows] == [1, 2]


# -- vq stage ---------------------------------------------------------------


def test_vq_run_dir_layout(chain):
    root, cfg_vq, _, _ = chain
    run = root / "vq"
    assert (run / "config.json").is_file()
    assert (run / "metrics.csv").is_file()
    assert (run / "artifacts" / "summary.json").is_file()
    assert (run / "checkpoints" / "epoch_0001" / "manifest.json").is_file()
    header, rows = read_metrics(run / "metrics.csv")
    assert header == list(CSV_COLUMNS)
    assert len(rows) == cfg_vq["train"]["epochs"] * 4
    assert [int(r[0]) for r in rows] == list(range(1, len(rows) + 1))
    for _, total, text, eeg, orth, _ in rows:
        assert text == 0.0 and orth == 0.0 and eeg == total


def test_vq_loss_decreases(tmp_path, data_dir):
    cfg = toy_cfg(data_dir, train={"epochs": 6})
    summary = run_vq_stage(cfg, tmp_path / "run")
    avgs = summary["epoch_avg_loss"]
    assert summary["steps"] == 24
    assert avgs[-1] < avgs[0]
    assert summary["final_over_first"] == pytest.approx(avgs[-1] / avgs[0])
    health = summary["codebook_health"]
    assert health["perplexity"] >= 1.0
    assert 0 <= health["dead_entries"] < 8


def test_vq_resume_continues_step_counter(tmp_path, data_dir):
    run = tmp_path / "run"
    run_vq_stage(toy_cfg(data_dir, train={"epochs": 2}), run)
    run_vq_stage(toy_cfg(data_dir, train={"epochs": 4}), run, resume=True)
    _, rows = read_metrics(run / "metrics.csv")
    assert [int(r[0]) for r in rows] == list(range(1, 17))
    path, meta = find_latest_checkpoint(run)
    assert path.name == "epoch_0003"
    assert meta["step"] == 16 and meta["epoch"] == 3


def test_find_latest_skips_incomplete_checkpoints(tmp_path, data_dir):
    run = tmp_path / "run"
    run_vq_stage(toy_cfg(data_dir, train={"epochs": 1}), run)
    (run / "checkpoints" / "epoch_0007").mkdir()  # no manifest inside
    path, _ = find_latest_checkpoint(run)
    assert path.name == "epoch_0000"
    assert find_latest_checkpoint(tmp_path / "absent") is None


def test_load_model_round_trip(chain):
    root, _, _, _ = chain
    ckpt = root / "vq" / "checkpoints" / "epoch_0001"
    model, meta = load_model(ckpt)
    assert meta["stage"] == "vq"
    arrays, _ = load_checkpoint(ckpt)
    named = model.named_parameters()
    for name in ("quant.codebook", "encoder.embedder.conv1_w", "backbone.tok_emb.table"):
        np.testing.assert_array_equal(named[name].data, arrays[name])


# -- cpt stage --------------------------------------------------------------


def test_cpt_structure_opens_exactly_adapters_expansion_refiner(data_dir):
    model = build_model(toy_cfg(data_dir))
    _cpt_structure(model, np.random.default_rng(0))
    trainable = set(model.trainable_parameters())
    expansion = {f"backbone.{n}" for n in model.backbone.expansion_parameters()}
    named = model.named_parameters()
    adapters = {n for n in named if "lora_a" in n or "lora_b" in n}
    refiner = {n for n in named if n.startswith("refiner.")}
    assert adapters and refiner and expansion
    assert trainable == adapters | expansion | refiner
    for name in trainable:
        assert not name.startswith(("encoder.", "recon.", "quant."))


def test_cpt_requires_vq_init(tmp_path, data_dir):
    cfg = toy_cfg(data_dir)
    cfg["stage"] = "cpt"
    with pytest.raises(ConfigError, match="train.init_from"):
        run_cpt_stage(cfg, tmp_path / "run")
    bogus = tmp_path / "bogus"
    save_checkpoint(bogus, {"x": np.zeros(1)}, {"stage": "sft", "config": cfg})
    cfg["train"]["init_from"] = str(bogus)
    with pytest.raises(ConfigError, match="must start from a vq checkpoint"):
        run_cpt_stage(cfg, tmp_path / "run2")


def test_cpt_csv_identity(chain):
    root, _, cfg_cpt, _ = chain
    lam = cfg_cpt["train"]["lambda_orth"]
    _, rows = read_metrics(root / "cpt" / "metrics.csv")
    assert len(rows) == cfg_cpt["train"]["epochs"] * 4
    for _, total, text, eeg, orth, _ in rows:
        assert total == pytest.approx(text + eeg + lam * orth, abs=1e-9)
        assert text > 0.0 and eeg > 0.0


def test_cpt_leaves_signal_stages_untouched(chain):
    root, _, _, _ = chain
    before, _ = load_checkpoint(root / "vq" / "checkpoints" / "epoch_0001")
    after, meta = load_checkpoint(root / "cpt" / "checkpoints" / "epoch_0001")
    assert meta["stage"] == "cpt"
    for name in before:
        if name.startswith(("encoder.", "recon.", "quant.")):
            np.testing.assert_array_equal(before[name], after[name])
    moved = [n for n in before if n.startswith("refiner.")]
    assert any(not np.array_equal(before[n], after[n]) for n in moved)


def test_cpt_summary_reports_uniform_baseline(chain):
    root, _, cfg_cpt, _ = chain
    import json

    summary = json.loads((root / "cpt" / "artifacts" / "summary.json").read_text())
    assert summary["uniform_eeg_nll"] == pytest.approx(np.log(8))
    assert len(summary["epoch_avg_loss"]) == cfg_cpt["train"]["epochs"]


# -- sft stage --------------------------------------------------------------


def test_finetune_plan_contract(chain, data_dir):
    root, _, _, _ = chain
    model, _ = load_model(root / "cpt" / "checkpoints" / "epoch_0001")
    plan = decoupled_finetune_setup(model, 2e-3, np.random.default_rng(0))
    assert plan.group_lrs == {"adapter": 2e-3, "refiner": pytest.approx(2e-4)}
    trainable = plan.trainable(model)
    named = model.named_parameters()
    assert set(trainable) == {
        n for n in named if "lora_" in n or n.startswith("refiner.")
    }
    assert set(plan.frozen) == set(named) - set(trainable)
    scales = plan.lr_scales()
    assert set(scales) == {n for n in named if n.startswith("refiner.")}
    assert all(s == pytest.approx(0.1) for s in scales.values())
    for name, t in named.items():
        assert t.requires_grad == (name in trainable)


def test_finetune_merges_previous_adapter(chain):
    root, _, _, _ = chain
    model, _ = load_model(root / "cpt" / "checkpoints" / "epoch_0001")
    wq = model.backbone.blocks[0].attn.wq
    base_before = wq.w.data.copy()
    assert np.abs(wq.lora_b.data).max() > 0  # cpt actually trained the adapter
    decoupled_finetune_setup(model, 1e-3, np.random.default_rng(0))
    assert np.abs(wq.w.data - base_before).max() > 0  # old adapter folded in
    assert np.all(wq.lora_b.data == 0.0)  # fresh adapter starts at zero


def test_refiner_moves_at_a_tenth_of_adapter_rate(chain):
    # with unit gradients everywhere, AdamW moves each weight by ~lr * scale
    root, _, _, _ = chain
    model, _ = load_model(root / "cpt" / "checkpoints" / "epoch_0001")
    plan = decoupled_finetune_setup(model, 1e-3, np.random.default_rng(0))
    trainable = plan.trainable(model)
    opt = AdamW(trainable, lr=1e-3, lr_scales=plan.lr_scales())
    before = {n: t.data.copy() for n, t in trainable.items()}
    opt.step({n: np.ones_like(t.data) for n, t in trainable.items()}, lr=1e-3)
    deltas = {n: np.abs(t.data - before[n]).max() for n, t in trainable.items()}
    adapter_move = max(v for n, v in deltas.items() if "lora_" in n)
    refiner_move = max(v for n, v in deltas.items() if n.startswith("refiner."))
    assert refiner_move / adapter_move == pytest.approx(0.1, rel=1e-6)


def test_balanced_order_oversamples_rare_class():
    labels = ["a"] * 9 + ["b"]
    hits = 0
    for epoch in range(200):
        order = balanced_order(labels, np.random.default_rng(epoch), True)
        hits += int(np.sum(order == 9))
    assert 0.45 <= hits / 2000 <= 0.55  # rare class drawn ~half the time
    plain = balanced_order(labels, np.random.default_rng(0), False)
    assert sorted(plain.tolist()) == list(range(10))


def test_sft_requires_cpt_init(tmp_path, data_dir, chain):
    root, _, _, _ = chain
    cfg = toy_cfg(data_dir)
    cfg["stage"] = "sft"
    with pytest.raises(ConfigError, match="train.init_from"):
        run_sft_stage(cfg, tmp_path / "run")
    cfg["train"]["init_from"] = str(root / "vq" / "checkpoints" / "epoch_0001")
    with pytest.raises(ConfigError, match="must start from a cpt checkpoint"):
        run_sft_stage(cfg, tmp_path / "run2")


def test_sft_metrics_and_summary(chain):
    root, _, _, cfg_sft = chain
    _, rows = read_metrics(root / "sft" / "metrics.csv")
    assert len(rows) == cfg_sft["train"]["epochs"] * 4
    for _, total, text, eeg, orth, _ in rows:
        assert eeg == 0.0 and orth == 0.0 and text == total
    import json

    summary = json.loads((root / "sft" / "artifacts" / "summary.json").read_text())
    assert summary["plan"] == {
        "adapter": cfg_sft["optimizer"]["lr"],
        "refiner": pytest.approx(0.1 * cfg_sft["optimizer"]["lr"]),
    }


def test_sft_resume_continues(tmp_path, data_dir, chain):
    root, _, _, cfg_sft = chain
    run = tmp_path / "run"
    cfg = copy.deepcopy(cfg_sft)
    cfg["train"]["epochs"] = 1
    run_sft_stage(cfg, run)
    cfg = copy.deepcopy(cfg_sft)
    cfg["train"]["epochs"] = 2
    run_sft_stage(cfg, run, resume=True)
    _, rows = read_metrics(run / "metrics.csv")
    assert [int(r[0]) for r in rows] == list(range(1, 9))


def test_stage_dispatch_names():
    assert set(STAGE_RUNNERS) == {"vq", "cpt", "sft"}
