"""
Toy-scale acceptance runs: gradients through the full rate-distortion loss, codec round
trips on trained models, two-pass decode speed, the directional ablations, training
stability and position-encoding generalization.

All of these are slow; run them with --runslow.
"""
import time
from dataclasses import replace

import numpy as np
import pytest

import pipeline
import tensor as T
from conftest import TINY
from corpus import SyntheticCorpus
from models import CompressionModel, ModelConfig, TrainConfig
from pipeline import decode, encode, reconstruct
from science import (ablate_context, ablate_pe, ablate_topk, distance_correlation, position_impact,
                     train_variant)

pytestmark = pytest.mark.slow

TOY = TrainConfig(steps=400, batch_size=2, base_lr=1e-3, log_every=100)


@pytest.fixture(scope="module")
def corpus():
    return SyntheticCorpus(64)


@pytest.fixture(scope="module")
def held_out():
    return SyntheticCorpus(64).held_out(6, seed=21)


@pytest.fixture(scope="module")
def context_table(corpus, held_out):
    return ablate_context(corpus, ModelConfig(**TINY), TOY, held_out, verbose=False).set_index("setting")


# =============================================================================
# Gradient integrity
# =============================================================================

class TestGradientIntegrity:

    @pytest.mark.parametrize("variant, size", [("context-only", 32), ("joint", 64)])
    def test_rd_loss_gradient(self, variant, size):
        config = ModelConfig(**{**TINY, "d_model": 8, "k": None, "entropy_variant": variant})
        with T.precision("float64"):
            model = CompressionModel(config, seed=0).train()
            x = T.Tensor(SyntheticCorpus(size).image(np.random.default_rng(2))[None])

            def loss(_):
                return model.forward_train(x, 0.01, np.random.default_rng(1)).total

            for prefix in ("encoder.", "decoder.", "entroformer.", "hyper_density."):
                _, parameter = next(item for item in model.named_parameters() if item[0].startswith(prefix))
                assert T.grad_check(loss, parameter, max_coords=4) < 1e-4, prefix


# =============================================================================
# Codec on trained models
# =============================================================================

class TestTrainedCodec:

    @pytest.mark.parametrize("lam", [0.002, 0.05])
    def test_round_trips_both_modes(self, corpus, lam):
        model, diverged = train_variant(ModelConfig(**TINY), replace(TOY, lam=lam, steps=150), corpus,
                                        verbose=False)
        assert not diverged
        images = SyntheticCorpus(64).held_out(16, seed=40) + SyntheticCorpus(128).held_out(4, seed=41)
        images[-1], images[-2] = images[-1][:, :100, :90], images[-2][:, :70, :128]
        coded_symbols = 0
        for x in images:
            for mode in ("serial", "parallel"):
                encoded = encode(x, model, mode)
                result = decode(encoded.bitstream.__class__.from_bytes(encoded.bitstream.to_bytes()), model)
                np.testing.assert_array_equal(result.y_hat, encoded.y_hat)
                np.testing.assert_array_equal(result.z_hat, encoded.z_hat)
                np.testing.assert_array_equal(result.x_hat, reconstruct(encoded.y_hat, model, x.shape[1:]))
                assert result.x_hat.shape == x.shape
                coded_symbols += int(np.count_nonzero(encoded.y_hat))
        assert coded_symbols > 0

    def test_two_pass_decode_is_much_faster(self, tiny_model, monkeypatch):
        monkeypatch.setattr(pipeline, "reconstruct", lambda y_hat, model, size: np.zeros((3,) + tuple(size)))
        x = SyntheticCorpus(256).image(np.random.default_rng(6))
        elapsed = {}
        for mode in ("serial", "parallel"):
            stream = encode(x, tiny_model, mode).bitstream
            runs = []
            for _ in range(3):
                started = time.perf_counter()
                result = decode(stream, tiny_model)
                runs.append(time.perf_counter() - started)
            assert stream.latent_shape[1:] == (16, 16)
            assert result.forward_passes == (256 if mode == "serial" else 2)
            elapsed[mode] = min(runs)
        assert elapsed["serial"] / elapsed["parallel"] > 10


# =============================================================================
# Directional ablations
# =============================================================================

class TestAblations:

    def test_joint_beats_hyperprior_only(self, context_table):
        assert not context_table["diverged"].any()
        assert context_table.loc["joint", "bpp"] < context_table.loc["hyperprior-only", "bpp"]

    def test_bidirectional_slice2_not_worse(self, context_table):
        assert (context_table.loc["parallel-bidirectional", "slice2_bpp"]
                <= context_table.loc["parallel-unidirectional", "slice2_bpp"])

    def test_diamond_rpe_not_worse_than_none(self, corpus, held_out):
        table = ablate_pe(corpus, ModelConfig(**TINY), TOY, held_out, ("none", "rpe-diamond"),
                          verbose=False).set_index("position_encoding")
        assert table.loc["rpe-diamond", "bpp"] <= table.loc["none", "bpp"]

    def test_rate_impact_falls_with_distance(self, corpus):
        config = replace(TOY, key_mask_ratio=0.3, steps=600)
        model, diverged = train_variant(ModelConfig(**TINY), config, corpus, verbose=False)
        assert not diverged
        impact = position_impact(model, SyntheticCorpus(128).held_out(3, seed=50), window=3)
        rho, p_value = distance_correlation(impact)
        assert rho < 0 and p_value < 0.05


# =============================================================================
# Stability and generalization
# =============================================================================

class TestStability:

    def test_top16_seeds_stay_finite(self, corpus, held_out):
        table = ablate_topk(corpus, ModelConfig(**TINY), replace(TOY, steps=2000), held_out[:2],
                            ks=(16,), seeds=range(5), verbose=False)
        assert table["nan_rate"].iloc[0] == 0.0
        assert np.isfinite(table["bpp"].iloc[0])

    def test_relative_position_generalizes_better(self):
        corpus = SyntheticCorpus(128)
        larger = SyntheticCorpus(256).held_out(3, seed=60)
        table = ablate_pe(corpus, ModelConfig(**TINY), replace(TOY, patch_size=128, steps=300),
                          corpus.held_out(3, seed=60), ("absolute", "rpe-diamond"), larger=larger,
                          verbose=False).set_index("position_encoding")
        assert np.isfinite(table["bpp_larger"]).all()
        degradation = table["bpp_larger"] - table["bpp"]
        assert degradation["rpe-diamond"] < degradation["absolute"]
