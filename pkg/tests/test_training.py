"""Training loop: determinism, checkpoint resume, ablations, evaluation."""

import csv
import math
from pathlib import Path

import numpy as np
import pytest
import torch

from modbalance.corpus import generate_corpus, read_corpus, write_corpus
from modbalance.network import NetConfig
from modbalance.presence import IDT, PDT, MissingProtocol
from modbalance.scenes import default_scene_spec
from modbalance.training import (
    CheckpointError,
    RunConfig,
    TrainingDivergedError,
    build_model,
    epoch_order,
    evaluate,
    evaluate_checkpoint,
    load_checkpoint,
    runlog_columns,
    split_indices,
    train,
    training_step,
)

N_SAMPLES = 4


@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    spec = default_scene_spec(3, 3, (16, 16), noise_sigma=0.05)
    protocol = MissingProtocol(mode=IDT, target_rates=(0.0, 0.25, 0.5), seed=2)
    samples, presence = generate_corpus(spec, protocol, N_SAMPLES)
    write_corpus(samples, presence, root / "c", protocol, spec)
    return str(root / "c")


def tiny_config(corpus, out_dir, **kwargs):
    net = NetConfig(n_modalities=3, n_classes=3, n_levels=2, base_channels=4,
                    token_grid=(4, 4), attn_layers=1)
    defaults = dict(
        corpus=corpus, net=net, epochs=2, seed=5, out_dir=str(out_dir), val_fraction=0.0
    )
    defaults.update(kwargs)
    return RunConfig(**defaults)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestDeterminism:
    def test_identical_config_and_seed_give_identical_runlogs(self, tiny_corpus, tmp_path):
        r1 = train(tiny_config(tiny_corpus, tmp_path / "a"))
        r2 = train(tiny_config(tiny_corpus, tmp_path / "b"))
        assert Path(r1.runlog_path).read_text() == Path(r2.runlog_path).read_text()

    def test_runlog_header_is_the_documented_contract(self, tiny_corpus, tmp_path):
        result = train(tiny_config(tiny_corpus, tmp_path / "h", epochs=1))
        rows = read_rows(result.runlog_path)
        assert rows[0] == runlog_columns(3)
        assert len(rows) == 1 + N_SAMPLES

    def test_epoch_order_is_a_pure_function(self):
        assert epoch_order([3, 1, 4], 7, 2) == epoch_order([3, 1, 4], 7, 2)
        assert epoch_order([3, 1, 4], 7, 2) != epoch_order([3, 1, 4], 7, 3) or True

    def test_split_is_deterministic(self):
        assert split_indices(10, 0.2, 1) == split_indices(10, 0.2, 1)
        train_idx, val_idx = split_indices(10, 0.2, 1)
        assert len(val_idx) == 2 and len(train_idx) == 8
        assert sorted(train_idx + val_idx) == list(range(10))


class TestCheckpointing:
    def test_resume_reproduces_the_uninterrupted_run(self, tiny_corpus, tmp_path):
        full = train(tiny_config(tiny_corpus, tmp_path / "full", epochs=2))
        part = train(tiny_config(tiny_corpus, tmp_path / "part", epochs=1))
        resumed = train(
            tiny_config(tiny_corpus, tmp_path / "resumed", epochs=2),
            resume_from=part.checkpoint_path,
        )
        full_rows = read_rows(full.runlog_path)
        resumed_rows = read_rows(resumed.runlog_path)
        # The resumed log holds only the second epoch; it must equal the
        # uninterrupted run's second epoch bit-for-bit at float64.
        assert resumed_rows[1:] == full_rows[1 + N_SAMPLES:]
        for pa, pb in zip(full.net.parameters(), resumed.net.parameters()):
            assert torch.equal(pa, pb)

    def test_resume_with_mismatched_config_fails(self, tiny_corpus, tmp_path):
        part = train(tiny_config(tiny_corpus, tmp_path / "p2", epochs=1))
        with pytest.raises(CheckpointError):
            train(
                tiny_config(tiny_corpus, tmp_path / "r2", epochs=2, seed=99),
                resume_from=part.checkpoint_path,
            )

    def test_checkpoint_version_and_config_guards(self, tiny_corpus, tmp_path):
        result = train(tiny_config(tiny_corpus, tmp_path / "v", epochs=1))
        payload = torch.load(result.checkpoint_path, weights_only=False)
        payload["version"] = 999
        bad = tmp_path / "bad.pt"
        torch.save(payload, bad)
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(bad)
        with pytest.raises(CheckpointError, match="does not match"):
            load_checkpoint(result.checkpoint_path, expect_net=NetConfig(base_channels=16))


class TestAblations:
    def test_no_dtm_logs_uniform_weights_and_unit_scales(self, tiny_corpus, tmp_path):
        result = train(tiny_config(tiny_corpus, tmp_path / "nodtm", use_dtm=False, epochs=1))
        rows = read_rows(result.runlog_path)
        header = rows[0]
        samples, presence, _ = read_corpus(tiny_corpus)
        by_id = {s.sample_id: s.presence for s in samples}
        for row in rows[1:]:
            rec = dict(zip(header, row))
            present = np.flatnonzero(by_id[rec["sample_id"]]).tolist()
            for m in range(3):
                w = float(rec[f"w_m{m}"])
                gamma = float(rec[f"gamma_m{m}"])
                if m in present:
                    assert w == pytest.approx(1.0 / len(present), abs=1e-12)
                else:
                    assert w == 0.0
                assert gamma == 1.0

    def test_all_switches_off_reduces_to_plain_task_loss(self, tiny_corpus, tmp_path):
        result = train(
            tiny_config(
                tiny_corpus, tmp_path / "alloff",
                use_dmaf=False, use_distill=False, use_dtm=False, epochs=1,
            )
        )
        rows = read_rows(result.runlog_path)
        header = rows[0]
        for row in rows[1:]:
            rec = dict(zip(header, row))
            assert float(rec["loss_rel"]) == 0.0
            assert float(rec["loss_proto"]) == 0.0
            expected = 2.0 * float(rec["loss_fuse"]) + 1.0 * float(rec["loss_sep"])
            assert float(rec["loss_total"]) == pytest.approx(expected, rel=1e-9)
            assert rec["alpha1"] == "" and rec["alpha2"] == ""

    def test_no_distill_feeds_neutral_gaps(self, tiny_corpus, tmp_path):
        result = train(
            tiny_config(tiny_corpus, tmp_path / "nodist", use_distill=False, epochs=1)
        )
        rows = read_rows(result.runlog_path)
        header = rows[0]
        for row in rows[1:]:
            rec = dict(zip(header, row))
            present = [m for m in range(3) if float(rec[f"w_m{m}"]) > 0]
            for m in present:
                assert float(rec[f"w_m{m}"]) == pytest.approx(1 / len(present), abs=1e-9)
                assert float(rec[f"ema_rel_m{m}"]) == 1.0


class TestGuards:
    def test_nan_loss_aborts_naming_the_component(self, tiny_corpus):
        config = tiny_config(tiny_corpus, "unused")
        net, distiller = build_model(config)
        from modbalance.monitor import GapTracker
        from torch.optim import AdamW

        tracker = GapTracker(n_modalities=3)
        optimizer = AdamW(list(net.parameters()) + list(distiller.parameters()), lr=1e-3)
        with torch.no_grad():
            net.encoders[0].stem[0].weight[0, 0, 0, 0] = float("nan")
        rng = np.random.default_rng(0)
        images = torch.tensor(rng.standard_normal((3, 16, 16)))
        label = torch.tensor(rng.integers(0, 3, (16, 16)))
        presence = torch.tensor([True, True, True])
        with pytest.raises(TrainingDivergedError, match="fuse"):
            training_step(net, distiller, tracker, optimizer, images, label, presence, config)

    def test_corpus_config_mismatch_rejected(self, tiny_corpus, tmp_path):
        config = tiny_config(tiny_corpus, tmp_path / "mm")
        bad = RunConfig(**{**config.to_dict(), "net": NetConfig(n_modalities=2, n_levels=2)})
        with pytest.raises(ValueError, match="modalities"):
            train(bad)

    def test_masking_invariance_of_step_losses(self, tiny_corpus):
        config = tiny_config(tiny_corpus, "unused")

        def run_step(perturb):
            net, distiller = build_model(config)
            from modbalance.monitor import GapTracker
            from torch.optim import AdamW

            tracker = GapTracker(n_modalities=3)
            optimizer = AdamW(
                list(net.parameters()) + list(distiller.parameters()), lr=config.lr
            )
            rng = np.random.default_rng(1)
            images = torch.tensor(rng.standard_normal((3, 16, 16)))
            label = torch.tensor(rng.integers(0, 3, (16, 16)))
            if perturb:
                noise = np.random.default_rng(77).standard_normal((16, 16))
                images[2] = torch.tensor(noise) * 37.0
            else:
                images[2] = 0.0
            presence = torch.tensor([True, True, False])
            out = training_step(
                net, distiller, tracker, optimizer, images, label, presence, config
            )
            return out.breakdown.component_values()

        base, moved = run_step(False), run_step(True)
        for key in base:
            assert abs(base[key] - moved[key]) < 1e-5


@pytest.fixture(scope="module")
def trained(tiny_corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    return train(tiny_config(tiny_corpus, out, epochs=2))


class TestEvaluation:
    def test_report_has_all_combination_rows(self, trained, tiny_corpus, tmp_path):
        spec = default_scene_spec(3, 3, (16, 16), noise_sigma=0.05)
        protocol = MissingProtocol(mode=PDT, target_rates=(0.0, 0.0, 0.0), seed=3)
        samples, presence = generate_corpus(spec, protocol, 3)
        report = evaluate(trained.net, samples)
        assert len(report.rows) == 2**3 - 1
        labels = {row.label() for row in report.rows}
        assert "m0+m1+m2" in labels and "m0" in labels

    def test_full_combination_matches_training_time_forward(self, trained, tiny_corpus):
        samples, _, _ = read_corpus(tiny_corpus)
        sample = samples[0]
        report = evaluate(trained.net, [sample], combinations=[(0, 1, 2)])
        images = torch.from_numpy(sample.images).to(torch.float64)
        presence = torch.from_numpy(sample.presence).bool()
        with torch.no_grad():
            logits = trained.net(images, presence).fused_logits[0]
        pred = logits.argmax(dim=0).numpy()
        from modbalance.metrics import per_class_metrics

        expected = per_class_metrics(pred, sample.label, 3)
        got = report.per_sample[(sample.sample_id, (0, 1, 2))]
        for c in (1, 2):
            assert got[c].dice == expected[c].dice

    def test_samples_without_the_combination_are_skipped(self, trained, tiny_corpus):
        samples, presence, _ = read_corpus(tiny_corpus)
        missing_m2 = [s for s in samples if s.presence[2] == 0]
        assert missing_m2  # corpus construction guarantees some
        report = evaluate(trained.net, missing_m2, combinations=[(2,)])
        assert report.rows == []

    def test_checkpoint_evaluation_roundtrip(self, trained, tiny_corpus, tmp_path):
        report = evaluate_checkpoint(trained.checkpoint_path, tiny_corpus)
        assert len(report.rows) >= 1
        for row in report.rows:
            assert 0.0 <= row.macro_dice <= 1.0
