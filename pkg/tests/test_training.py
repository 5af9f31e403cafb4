import json
import math
import os

import numpy as np
import pytest

from cosmo import autodiff as ad
from cosmo import model as cm
from cosmo import training as tr
from cosmo.autodiff import Tensor
from cosmo.docs import Document, MediaItem, MediaRef, TextSpan, build_vocab, write_shard
from cosmo.training import (EPOCH_END, CycleLoader, DataSource, GuardConfig,
                            SourceSpec, TrainConfig, guard, lr_at)


def cfg(**kw):
    base = dict(lr_max=1e-3, schedule="constant", warmup_steps=2, max_steps=10,
                batch_size=2, loader_strategy="min", window_len=16)
    base.update(kw)
    return TrainConfig(**base)


def write_pair_shard(path, n_docs, seed=0, caption="red widget", d=8):
    rng = np.random.default_rng(seed)
    docs = []
    for i in range(n_docs):
        feats = rng.normal(size=(1, 2, d)).astype(np.float32)
        docs.append(Document(
            segments=[MediaRef(0), TextSpan(caption)],
            media=[MediaItem("image", feats, source_id=f"s{i}")],
            doc_id=f"d{i}"))
    write_shard(docs, path)


@pytest.fixture()
def tiny_setup(tmp_path):
    vocab = build_vocab(["red widget blue gizmo green lever"], max_size=300)
    pa = str(tmp_path / "a.jsonl")
    pb = str(tmp_path / "b.jsonl")
    write_pair_shard(pa, 4, seed=0, caption="red widget")
    write_pair_shard(pb, 4, seed=1, caption="blue gizmo")
    specs = [SourceSpec("a", "image_text", 1.0, [pa]),
             SourceSpec("b", "video_text", 1.0, [pb])]
    model = cm.build(cm.ModelConfig(vocab_size=len(vocab), d_model=16, n_heads=2,
                                    n_layers_total=4, split_index=2,
                                    n_latents=2, d_vision=8, n_patches=2,
                                    d_embed_contrastive=8, max_seq=64), seed=0)
    return vocab, specs, model, tmp_path


# -- schedules ---------------------------------------------------------------

def test_lr_warmup_endpoints():
    c = cfg(schedule="cosine", warmup_steps=100, max_steps=1000, lr_max=5e-4)
    assert lr_at(0, c) == 0.0
    assert lr_at(100, c) == 5e-4
    assert abs(lr_at(50, c) - 2.5e-4) < 1e-18


def test_cosine_closed_forms():
    c = cfg(schedule="cosine", warmup_steps=100, max_steps=1100, lr_max=1.0)
    assert abs(lr_at(1100, c)) < 1e-12  # cos(pi) = -1
    mid = 100 + (1100 - 100) // 2
    assert abs(lr_at(mid, c) - 0.5) < 1e-12
    assert abs(lr_at(600, c) - 0.5 * (1 + math.cos(math.pi * 0.5))) < 1e-12


def test_constant_schedule():
    c = cfg(schedule="constant", warmup_steps=10, max_steps=100, lr_max=0.3)
    for s in (10, 55, 100):
        assert lr_at(s, c) == 0.3


def test_cosine_restart_closed_form():
    c = cfg(schedule="cosine_restart", warmup_steps=100, max_steps=1100,
            lr_max=1.0, n_restarts=2)
    period = (1100 - 100) / 2
    for step in (100, 350, 600, 601, 850, 1100):
        q = ((step - 100) % period) / period
        expected = 0.5 * (1 + math.cos(math.pi * q))
        assert abs(lr_at(step, c) - expected) < 1e-12


def test_inverse_sqrt_closed_form():
    c = cfg(schedule="inverse_sqrt", warmup_steps=500, max_steps=10_000,
            lr_max=1.0)
    assert lr_at(500, c) == 1.0
    assert abs(lr_at(2000, c) - math.sqrt(500 / 2000)) < 1e-12


def test_step_clamped_beyond_max():
    c = cfg(schedule="cosine", warmup_steps=0, warmup_ratio=None, max_steps=100)
    assert lr_at(150, c) == lr_at(100, c)


def test_warmup_ratio():
    c = TrainConfig(lr_max=1.0, schedule="cosine", warmup_ratio=0.03,
                    max_steps=1000)
    assert c.warmup() == 30
    with pytest.raises(ValueError, match="exactly one"):
        TrainConfig(warmup_steps=5, warmup_ratio=0.1)
    with pytest.raises(ValueError, match="exactly one"):
        TrainConfig()


# -- guard -------------------------------------------------------------------

def test_guard_scale_to_ema():
    d = guard(5.0, 1.0, GuardConfig(spike_factor=2.0))
    assert d.action == "scale"
    assert abs(d.factor - 0.2) < 1e-15


def test_guard_skips_nan_and_inf():
    g = GuardConfig()
    assert guard(float("nan"), 1.0, g).action == "skip"
    assert guard(float("inf"), 1.0, g).action == "skip"


def test_guard_accepts_mild_increase():
    d = guard(1.1, 1.0, GuardConfig(spike_factor=2.0))
    assert d.action == "accept"


def test_guard_first_batch_accepts():
    assert guard(7.0, None, GuardConfig()).action == "accept"


def test_guard_config_validation():
    with pytest.raises(ValueError):
        GuardConfig(spike_factor=1.0)


def test_ema_update():
    assert tr.update_ema(None, 2.0, 0.99) == 2.0
    assert abs(tr.update_ema(1.0, 2.0, 0.9) - 1.1) < 1e-15


# -- cycles ------------------------------------------------------------------

def make_sized_sources(tmp_path, vocab, sizes):
    specs = []
    for i, n in enumerate(sizes):
        p = str(tmp_path / f"src{i}.jsonl")
        write_pair_shard(p, n, seed=i)
        specs.append(SourceSpec(f"src{i}", "image_text", 1.0, [p]))
    return [DataSource(s, vocab, batch_size=1, window_len=16) for s in specs]


def count_cycles(loader, rng):
    loader.start_epoch(rng)
    n = 0
    while True:
        c = loader.next_cycle(rng)
        if c is EPOCH_END:
            return n
        n += 1


def test_min_strategy_cycle_count(tmp_path):
    vocab = build_vocab(["red widget"], max_size=300)
    sources = make_sized_sources(tmp_path, vocab, [10, 20])
    loader = CycleLoader(sources, "min")
    assert count_cycles(loader, np.random.default_rng(0)) == 10


def test_max_strategy_restarts_small_source(tmp_path):
    vocab = build_vocab(["red widget"], max_size=300)
    sources = make_sized_sources(tmp_path, vocab, [10, 20])
    loader = CycleLoader(sources, "max")
    rng = np.random.default_rng(0)
    loader.start_epoch(rng)
    n = 0
    while loader.next_cycle(rng) is not EPOCH_END:
        n += 1
    assert n == 20


def test_round_robin_single_draws(tmp_path):
    vocab = build_vocab(["red widget"], max_size=300)
    sources = make_sized_sources(tmp_path, vocab, [1, 1, 1])
    loader = CycleLoader(sources, "round_robin")
    rng = np.random.default_rng(0)
    loader.start_epoch(rng)
    seen = []
    while True:
        c = loader.next_cycle(rng)
        if c is EPOCH_END:
            break
        assert len(c) == 1
        seen.append(c[0][0].name)
    assert seen == ["src0", "src1", "src2"]


def test_min_max_cycle_has_one_batch_per_source(tmp_path):
    vocab = build_vocab(["red widget"], max_size=300)
    sources = make_sized_sources(tmp_path, vocab, [3, 3])
    loader = CycleLoader(sources, "min")
    rng = np.random.default_rng(0)
    loader.start_epoch(rng)
    c = loader.next_cycle(rng)
    assert [s.name for s, _ in c] == ["src0", "src1"]


def test_empty_source_rejected(tmp_path):
    vocab = build_vocab(["red widget"], max_size=300)
    p = str(tmp_path / "empty.jsonl")
    write_shard([], p)
    with pytest.raises(ValueError, match="no documents"):
        DataSource(SourceSpec("e", "image_text", 1.0, [p]), vocab, 1, 16)
    with pytest.raises(ValueError, match="sources"):
        CycleLoader([], "min")


def test_source_spec_validation():
    with pytest.raises(ValueError, match="data_type"):
        SourceSpec("x", "text_only", 1.0, [])
    with pytest.raises(ValueError, match="weight"):
        SourceSpec("x", "image_text", 0.0, [])


# -- train_step --------------------------------------------------------------

def test_grad_clip_scales_norm():
    m = cm.build(cm.ModelConfig(vocab_size=40, d_model=16, n_heads=2,
                                n_layers_total=4, split_index=2, n_latents=2,
                                d_vision=8, d_embed_contrastive=8), seed=0)
    total = 0.0
    rng = np.random.default_rng(0)
    for p in m.learnable_params.values():
        p.grad = rng.normal(size=p.shape)
        total += (p.grad ** 2).sum()
    scale = 5.0 / math.sqrt(total)
    for p in m.learnable_params.values():
        p.grad = p.grad * scale  # norm exactly 5
    norm = tr.clip_gradients(m, 1.0)
    assert abs(norm - 5.0) < 1e-9
    after = math.sqrt(sum((p.grad ** 2).sum()
                          for p in m.learnable_params.values()))
    assert abs(after - 1.0) < 1e-9


def test_single_type_lm_only_runs(tiny_setup):
    vocab, specs, model, tmp = tiny_setup
    config = cfg(lambda_contrastive=0.0, max_steps=3)
    sources = tr.make_sources(specs[:1], vocab, config)
    state = tr.init_state(model, seed=0)
    loader = CycleLoader(sources, "min")
    loader.start_epoch(state.rng)
    rows = tr.train_step(model, loader.next_cycle(state.rng), state, config)
    assert len(rows) == 1
    assert rows[0]["c_loss"] is None
    assert rows[0]["lm_loss"] > 0


def test_paired_type_gets_contrastive(tiny_setup):
    vocab, specs, model, tmp = tiny_setup
    config = cfg(max_steps=3)
    sources = tr.make_sources(specs, vocab, config)
    state = tr.init_state(model, seed=0)
    loader = CycleLoader(sources, "min")
    loader.start_epoch(state.rng)
    rows = tr.train_step(model, loader.next_cycle(state.rng), state, config)
    assert all(r["c_loss"] is not None for r in rows)


def test_loss_decreases_on_fixed_caption(tiny_setup):
    vocab, specs, model, tmp = tiny_setup
    config = cfg(max_steps=60, warmup_steps=2, lr_max=3e-3,
                 lambda_contrastive=0.0)
    sources = tr.make_sources(specs[:1], vocab, config)
    state = tr.train(model, sources, config, str(tmp / "out"), vocab)
    lines = [json.loads(l) for l in
             open(tmp / "out" / "metrics.ndjson").read().splitlines()]
    early = np.mean([l["lm_loss"] for l in lines[:5]])
    late = np.mean([l["lm_loss"] for l in lines[-5:]])
    assert late < 0.5 * early


def test_frozen_params_bit_identical_after_training(tiny_setup):
    vocab, specs, model, tmp = tiny_setup
    snapshot = {k: p.data.tobytes() for k, p in model.frozen_params.items()}
    config = cfg(max_steps=20)
    sources = tr.make_sources(specs, vocab, config)
    tr.train(model, sources, config, str(tmp / "out"), vocab)
    for k, p in model.frozen_params.items():
        assert p.data.tobytes() == snapshot[k], k


def test_no_decay_predicate():
    assert tr._no_decay("fusion2/gate")
    assert tr._no_decay("fusion2/ln_g")
    assert tr._no_decay("contrastive/log_scale")
    assert not tr._no_decay("fusion2/down")
    assert not tr._no_decay("resampler/latents")


def test_all_skipped_cycle_leaves_params(tiny_setup):
    vocab, specs, model, tmp = tiny_setup
    config = cfg(max_steps=2)
    sources = tr.make_sources(specs[:1], vocab, config)
    state = tr.init_state(model, seed=0)
    loader = CycleLoader(sources, "min")
    loader.start_epoch(state.rng)
    before = {k: p.data.copy() for k, p in model.learnable_params.items()}

    def nan_hook(step, name, kind, loss):
        return ad.scale(loss, float("nan"))

    tr.train_step(model, loader.next_cycle(state.rng), state, config,
                  loss_hook=nan_hook)
    for k, p in model.learnable_params.items():
        np.testing.assert_array_equal(p.data, before[k])
    assert any(e.get("event") == "cycle_skipped" for e in state.events)


def test_guard_integration_spikes_and_nans(tiny_setup):
    vocab, specs, model, tmp = tiny_setup
    config = cfg(max_steps=120, warmup_steps=2, lr_max=1e-3)
    sources = tr.make_sources(specs, vocab, config)

    def hook(step, name, kind, loss):
        if kind != "lm" or name != "a":
            return loss
        if step and step % 50 == 0:
            return ad.scale(loss, 1e6 / max(float(loss.data), 1e-9))
        if step and step % 77 == 0:
            return ad.scale(loss, float("nan"))
        return loss

    tr.train(model, sources, config, str(tmp / "out"), vocab, loss_hook=hook)
    for p in model.learnable_params.values():
        assert np.isfinite(p.data).all()
    scale_steps = {e["step"] for e in
                   [e for s in [0] for e in []]}  # placeholder removed below
    events = tr.load_checkpoint(str(tmp / "out" / "final.ckpt"))[1].events
    scales = {e["step"] for e in events if e.get("event") == "scale"}
    skips = {e["step"] for e in events if e.get("event") == "skip"}
    assert {50, 100} <= scales
    assert {77} <= skips


# -- checkpointing -----------------------------------------------------------

def test_checkpoint_roundtrip(tiny_setup):
    vocab, specs, model, tmp = tiny_setup
    config = cfg(max_steps=4)
    sources = tr.make_sources(specs, vocab, config)
    state = tr.train(model, sources, config, str(tmp / "out"), vocab)
    loaded_model, loaded_state, loaded_config, loaded_vocab, loader_state = \
        tr.load_checkpoint(str(tmp / "out" / "final.ckpt"))
    assert loaded_state.step == state.step
    for k, p in model.learnable_params.items():
        np.testing.assert_array_equal(loaded_model.learnable_params[k].data,
                                      p.data)
    assert loaded_config.max_steps == 4
    assert loaded_vocab.id_to_word == vocab.id_to_word
    assert loader_state is not None


def test_checkpoint_shape_mismatch_refused(tiny_setup, tmp_path):
    vocab, specs, model, tmp = tiny_setup
    config = cfg(max_steps=2)
    sources = tr.make_sources(specs, vocab, config)
    tr.train(model, sources, config, str(tmp / "out"), vocab)
    path = str(tmp / "out" / "final.ckpt")
    from cosmo.checkpoint import load_archive, save_archive, ArchiveError
    manifest, arrays = load_archive(path)
    arrays["resampler/latents"] = np.zeros((7, 7))
    bad = str(tmp_path / "bad.ckpt")
    save_archive(bad, {k: v for k, v in manifest.items() if k != "params"}, arrays)
    with pytest.raises(ArchiveError, match="shape mismatch"):
        tr.load_checkpoint(bad)


def test_deterministic_replay(tiny_setup):
    vocab, specs, model, tmp = tiny_setup
    config = cfg(max_steps=8)

    def run(tag):
        m = cm.build(model.config, seed=0)
        sources = tr.make_sources(specs, vocab, config)
        tr.train(m, sources, config, str(tmp / tag), vocab)
        metrics = open(tmp / tag / "metrics.ndjson", "rb").read()
        ckpt = open(tmp / tag / "final.ckpt", "rb").read()
        return metrics, ckpt

    m1, c1 = run("r1")
    m2, c2 = run("r2")
    assert m1 == m2
    assert c1 == c2


def test_resume_matches_uninterrupted(tiny_setup):
    vocab, specs, model, tmp = tiny_setup

    def fresh_model():
        return cm.build(model.config, seed=0)

    full_cfg = cfg(max_steps=6)
    sources = tr.make_sources(specs, vocab, full_cfg)
    tr.train(fresh_model(), sources, full_cfg, str(tmp / "full"), vocab)

    half_cfg = cfg(max_steps=3)
    sources = tr.make_sources(specs, vocab, half_cfg)
    tr.train(fresh_model(), sources, half_cfg, str(tmp / "resumed"), vocab)
    m2, state2, _, vocab2, loader_state = tr.load_checkpoint(
        str(tmp / "resumed" / "final.ckpt"))
    sources = tr.make_sources(specs, vocab2, full_cfg)
    tr.train(m2, sources, full_cfg, str(tmp / "resumed"), vocab2, state=state2,
             loader_state=loader_state)

    full_lines = open(tmp / "full" / "metrics.ndjson").read().splitlines()
    resumed_lines = open(tmp / "resumed" / "metrics.ndjson").read().splitlines()
    assert full_lines == resumed_lines
    a = open(tmp / "full" / "final.ckpt", "rb").read()
    b = open(tmp / "resumed" / "final.ckpt", "rb").read()
    assert a == b
