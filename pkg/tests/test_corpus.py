"""On-disk corpus format: bit-exact round trips, manifest diagnostics."""

import json

import numpy as np
import pytest

from modbalance.corpus import (
    CorpusError,
    generate_corpus,
    read_corpus,
    read_manifest,
    write_corpus,
)
from modbalance.presence import IDT, PDT, MissingProtocol
from modbalance.scenes import default_scene_spec


@pytest.fixture
def small_corpus(tmp_path):
    spec = default_scene_spec(3, 3, (16, 16), noise_sigma=0.1)
    protocol = MissingProtocol(mode=IDT, target_rates=(0.25, 0.5, 0.5), seed=4)
    samples, presence = generate_corpus(spec, protocol, 4)
    manifest = write_corpus(samples, presence, tmp_path / "corpus", protocol, spec)
    return spec, protocol, samples, presence, tmp_path / "corpus", manifest


class TestRoundTrip:
    def test_bit_exact(self, small_corpus):
        _, _, samples, presence, path, _ = small_corpus
        loaded, loaded_presence, manifest = read_corpus(path)
        assert [s.sample_id for s in loaded] == [s.sample_id for s in samples]
        for orig, back in zip(samples, loaded):
            assert orig.images.tobytes() == back.images.tobytes()
            assert orig.label.tobytes() == back.label.tobytes()
            assert np.array_equal(orig.presence, back.presence)
        assert np.array_equal(presence.entries, loaded_presence.entries)

    def test_manifest_records_protocol_and_realized_rates(self, small_corpus):
        _, protocol, _, presence, path, manifest = small_corpus
        assert manifest["mode"] == IDT
        assert manifest["target_rates"] == [0.25, 0.5, 0.5]
        assert manifest["seed"] == protocol.seed
        assert manifest["realized_missing_rates"] == presence.missing_rates().tolist()
        assert manifest == read_manifest(path)

    def test_table_preset_realized_rates(self, tmp_path):
        spec = default_scene_spec(4, 3, (16, 16))
        protocol = MissingProtocol(mode=IDT, target_rates=(0.2, 0.4, 0.6, 0.8), seed=0)
        samples, presence = generate_corpus(spec, protocol, 10)
        manifest = write_corpus(samples, presence, tmp_path / "c", protocol, spec)
        assert manifest["realized_missing_rates"] == [0.2, 0.4, 0.6, 0.8]


class TestDiagnostics:
    def test_truncated_plane_names_the_sample(self, small_corpus):
        *_, path, manifest = small_corpus
        victim = manifest["sample_ids"][2]
        plane = path / "samples" / victim / "modality_01.raw"
        plane.write_bytes(plane.read_bytes()[:-8])
        with pytest.raises(CorpusError, match=victim):
            read_corpus(path)

    def test_missing_plane_names_the_sample(self, small_corpus):
        *_, path, manifest = small_corpus
        victim = manifest["sample_ids"][0]
        (path / "samples" / victim / "label.raw").unlink()
        with pytest.raises(CorpusError, match=victim):
            read_corpus(path)

    def test_version_mismatch_is_explicit(self, small_corpus):
        *_, path, manifest = small_corpus
        bad = dict(manifest)
        bad["format_version"] = 99
        (path / "manifest.json").write_text(json.dumps(bad))
        with pytest.raises(CorpusError, match="version 99"):
            read_corpus(path)

    def test_corrupt_manifest(self, small_corpus):
        *_, path, _ = small_corpus
        (path / "manifest.json").write_text("{not json")
        with pytest.raises(CorpusError, match="corrupt"):
            read_corpus(path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(CorpusError, match="manifest"):
            read_corpus(tmp_path / "nowhere")


class TestGeneration:
    def test_presence_rows_match_rendered_samples(self, small_corpus):
        _, _, samples, presence, _, _ = small_corpus
        for i, sample in enumerate(samples):
            assert np.array_equal(sample.presence, presence.row(i))
            for m in np.flatnonzero(sample.presence == 0):
                assert not sample.images[m].any()

    def test_generation_is_deterministic(self):
        spec = default_scene_spec(2, 3, (16, 16), noise_sigma=0.05)
        protocol = MissingProtocol(mode=IDT, target_rates=(0.25, 0.25), seed=9)
        a_samples, a_presence = generate_corpus(spec, protocol, 4)
        b_samples, b_presence = generate_corpus(spec, protocol, 4)
        assert np.array_equal(a_presence.entries, b_presence.entries)
        for a, b in zip(a_samples, b_samples):
            assert np.array_equal(a.images, b.images)
            assert np.array_equal(a.label, b.label)

    def test_pdt_mode_yields_full_availability(self):
        spec = default_scene_spec(3, 3, (16, 16))
        protocol = MissingProtocol(mode=PDT, target_rates=(0.0, 0.0, 0.0), seed=1)
        _, presence = generate_corpus(spec, protocol, 6)
        assert (presence.entries == 1).all()
