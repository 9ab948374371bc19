"""Tests for aptdiff.diagnostics: probe sets, delta noise, gamma reports, sampling."""

import pytest
import torch

from aptdiff.cond import UnknownTokenError
from aptdiff.corpus import make_corpus, make_reference_set
from aptdiff.diagnostics import (
    delta_noise,
    delta_noise_for_run,
    export_attention_maps,
    gamma_report,
    make_probe_set,
    probe_set_for,
    run_checkpoints,
    sample,
)
from aptdiff.indicator import BinMap
from aptdiff.runlog import IndicatorLog, LogParseError
from aptdiff.trainer import personalize

from .conftest import TINY_NET, tiny_apt

TEMPLATE = "a photo of a {} in a green field"


@pytest.fixture(scope="module")
def tuned_run(prior, tmp_path_factory):
    refs = make_reference_set(1, TINY_NET.image_size)
    return personalize(refs, tiny_apt(), prior, tmp_path_factory.mktemp("tuned"))


@pytest.fixture(scope="module")
def untrained_run(prior, tmp_path_factory):
    refs = make_reference_set(1, TINY_NET.image_size)
    return personalize(refs, tiny_apt(steps=0), prior, tmp_path_factory.mktemp("untrained"))


@pytest.fixture(scope="module")
def probes(tuned_run):
    return probe_set_for(tuned_run.checkpoint, n=12, seed=7)


# ---------------------------------------------------------------------------
# Probe sets
# ---------------------------------------------------------------------------


class TestProbeSet:
    def test_timesteps_stratified(self):
        corpus = make_corpus(4, 16, seed=0)
        binmap = BinMap(20, 10)
        probes = make_probe_set(corpus, [TEMPLATE], binmap, n=25, seed=1)
        assert len(probes) == 25
        for i, t in enumerate(probes.t.tolist()):
            assert t // binmap.width == i % binmap.B

    def test_deterministic(self):
        corpus = make_corpus(4, 16, seed=0)
        a = make_probe_set(corpus, [TEMPLATE], BinMap(20, 10), n=8, seed=3)
        b = make_probe_set(corpus, [TEMPLATE], BinMap(20, 10), n=8, seed=3)
        assert torch.equal(a.x0, b.x0)
        assert torch.equal(a.eps, b.eps)
        assert torch.equal(a.t, b.t)

    def test_rejects_empty_inputs(self):
        corpus = make_corpus(2, 16, seed=0)
        with pytest.raises(ValueError):
            make_probe_set(corpus, [TEMPLATE], BinMap(20, 10), n=0)
        with pytest.raises(ValueError):
            make_probe_set([], [TEMPLATE], BinMap(20, 10))
        with pytest.raises(ValueError):
            make_probe_set(corpus, [], BinMap(20, 10))

    def test_prior_has_no_templates(self, prior):
        with pytest.raises(ValueError, match="caption template"):
            probe_set_for(prior)


# ---------------------------------------------------------------------------
# Delta noise
# ---------------------------------------------------------------------------


class TestDeltaNoise:
    def test_untrained_adapters_give_zero(self, untrained_run, probes):
        ckpt = untrained_run.checkpoint
        assert delta_noise(ckpt, probes, "training") == 0.0
        assert delta_noise(ckpt, probes, "class") == 0.0

    def test_trained_adapters_diverge(self, tuned_run, probes):
        assert delta_noise(tuned_run.checkpoint, probes) > 0.0

    def test_zero_adapter_scale_with_class_caption(self, tuned_run, probes):
        assert delta_noise(tuned_run.checkpoint, probes, "class", adapter_scale=0.0) == 0.0

    def test_batching_does_not_matter(self, tuned_run, probes):
        a = delta_noise(tuned_run.checkpoint, probes, batch_size=5)
        b = delta_noise(tuned_run.checkpoint, probes, batch_size=12)
        assert a == pytest.approx(b, rel=1e-6)

    def test_rejects_prior(self, prior, probes):
        with pytest.raises(ValueError, match="no adapters"):
            delta_noise(prior, probes)

    def test_rejects_unknown_conditioning(self, tuned_run, probes):
        with pytest.raises(ValueError, match="Unknown conditioning"):
            delta_noise(tuned_run.checkpoint, probes, "none")

    def test_rejects_empty_probe_set(self, tuned_run, probes):
        empty = type(probes)(
            x0=probes.x0[:0],
            eps=probes.eps[:0],
            t=probes.t[:0],
            template_index=probes.template_index[:0],
            templates=probes.templates,
            seed=probes.seed,
        )
        with pytest.raises(ValueError, match="empty"):
            delta_noise(tuned_run.checkpoint, empty)

    def test_for_run(self, tuned_run):
        report = delta_noise_for_run(tuned_run.run_dir, num_probes=6, probe_seed=2)
        assert report.steps == [2, 4]
        assert len(report.values) == 2
        assert all(v > 0.0 for v in report.values)
        data = report.to_dict()
        assert data["probe_seed"] == 2
        assert data["conditioning"] == "training"

    def test_run_checkpoints_skip_initial(self, untrained_run):
        assert run_checkpoints(untrained_run.run_dir) == []
        assert len(run_checkpoints(untrained_run.run_dir, include_initial=True)) == 1
        with pytest.raises(ValueError, match="after step 0"):
            delta_noise_for_run(untrained_run.run_dir)

    def test_run_without_checkpoints(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            run_checkpoints(tmp_path)


# ---------------------------------------------------------------------------
# Gamma report
# ---------------------------------------------------------------------------


def _write_indicator_log(path, rows):
    log = IndicatorLog(path)
    for step, bin_, gamma in rows:
        log.append({"step": step, "bin": bin_, "ema_phi": 0.1, "ema_theta": 0.1, "gamma": gamma})
    return path


class TestGammaReport:
    def test_summary(self, tmp_path):
        path = _write_indicator_log(
            tmp_path / "indicator_log.csv", [(1, 0, 0.2), (2, 9, 0.9), (3, 0, 0.7)]
        )
        report = gamma_report(path, 10)
        assert report.curves[0] == [(1, 0.2), (3, 0.7)]
        assert report.final[0] == 0.7
        assert report.final[9] == 0.9
        assert report.first_exceed[0] == 3
        assert report.first_exceed[9] == 2
        assert report.first_exceed[5] is None
        assert report.low_noise_mean == pytest.approx(0.7 / 3)
        assert report.high_noise_mean == pytest.approx(0.3)
        assert report.to_dict()["plot"] is None

    def test_few_bins_split_without_overlap(self, tmp_path):
        path = _write_indicator_log(
            tmp_path / "ind.csv", [(1, 0, 0.8), (2, 1, 0.6), (3, 2, 0.2), (4, 3, 0.0)]
        )
        report = gamma_report(path, 4)
        assert report.group_size == 2
        assert report.low_noise_mean == pytest.approx(0.7)
        assert report.high_noise_mean == pytest.approx(0.1)

    def test_threshold(self, tmp_path):
        path = _write_indicator_log(tmp_path / "ind.csv", [(1, 0, 0.2)])
        assert gamma_report(path, 10, threshold=0.1).first_exceed[0] == 1

    def test_plot(self, tuned_run, tmp_path):
        report = gamma_report(tuned_run.indicator_log, 10, tmp_path / "gamma.png")
        assert report.plot_path.exists()
        assert len(report.final) == 10

    def test_bin_out_of_range(self, tmp_path):
        path = _write_indicator_log(tmp_path / "ind.csv", [(1, 0, 0.0), (2, 12, 0.0)])
        with pytest.raises(LogParseError) as info:
            gamma_report(path, 10)
        assert info.value.lineno == 3


# ---------------------------------------------------------------------------
# Sampling and attention maps
# ---------------------------------------------------------------------------


class TestSample:
    def test_writes_png(self, tuned_run, tmp_path):
        out = tmp_path / "samples.png"
        images = sample(tuned_run.checkpoint, "a photo of a V* in a green field", n=2, out_path=out)
        assert images.shape == (2, 3, 16, 16)
        assert out.exists()

    def test_seeded(self, prior):
        a = sample(prior, "a photo of a circle", n=1, seed=5)
        b = sample(prior, "a photo of a circle", n=1, seed=5)
        assert torch.equal(a, b)

    def test_unguided(self, prior):
        images = sample(prior, "a photo of a circle", n=1, guidance_scale=0.0)
        assert torch.isfinite(images).all()

    def test_adapters_off_matches_prior(self, tuned_run, prior):
        caption = "a photo of a circle in a green field"
        off = sample(tuned_run.checkpoint, caption, n=1, seed=2, adapters=False)
        assert torch.equal(off, sample(prior, caption, n=1, seed=2))

    def test_unknown_word(self, prior):
        with pytest.raises(UnknownTokenError):
            sample(prior, "a photo of a V*", n=1)

    def test_n_positive(self, prior):
        with pytest.raises(ValueError):
            sample(prior, "a photo", n=0)


class TestAttentionMaps:
    def test_export(self, tuned_run, tmp_path):
        out = tmp_path / "attention.png"
        result = export_attention_maps(tuned_run.checkpoint, out, t=10)
        assert out.exists()
        assert result["t"] == 10
        assert set(result["difference"]) == set(TINY_NET.tap_ids())
        tokens = next(iter(result["difference"].values()))
        assert "4:V*" in tokens

    def test_untrained_maps_match_prior(self, untrained_run, tmp_path):
        result = export_attention_maps(untrained_run.checkpoint, tmp_path / "a.png")
        for per_token in result["difference"].values():
            assert all(v == 0.0 for v in per_token.values())

    def test_requires_personalized_checkpoint(self, prior, tmp_path):
        with pytest.raises(ValueError, match="personalized"):
            export_attention_maps(prior, tmp_path / "a.png")
