"""Behavioral checks that only make sense against a trained model."""

import numpy as np

from patchlikely.flow import flow_forward, flow_inverse, log_likelihood, sample_patch
from patchlikely.generation import manipulate_patch
from patchlikely.numerics import Rng
from patchlikely.training import PatchDataset, dequantize, sample_patches


def test_uniform_patch_more_likely_than_noise(corpus_model):
    gray = np.zeros((16, 16, 3), np.float32)
    noise = (Rng(41).random01((16, 16, 3)) - 0.5).astype(np.float32)
    assert log_likelihood(gray, corpus_model) > log_likelihood(noise, corpus_model)


def test_latent_roundtrip_on_trained_model(corpus_model, corpus_dir):
    dataset = PatchDataset(corpus_dir, 16)
    rng = Rng(42)
    x = dequantize(sample_patches(dataset, 200, rng), rng)
    z, _ = flow_forward(x, corpus_model)
    z2, _ = flow_forward(flow_inverse(z, corpus_model), corpus_model)
    assert np.abs(z2 - z).max() < 1e-4


def test_origin_decodes_to_typical_patch(corpus_model):
    x = flow_inverse(np.zeros(corpus_model.latent_shape, np.float32),
                     corpus_model)
    assert np.all(np.isfinite(x))
    assert x.min() >= -0.6 and x.max() <= 0.6
    # the most-typical patch is smooth: tiny spatial variation
    assert float(x.std()) < 0.1


def test_sampled_patch_in_range(corpus_model):
    x = sample_patch(corpus_model, Rng(43), temperature=0.7)
    assert np.all(np.isfinite(x))
    assert x.min() >= -0.75 and x.max() <= 0.75


def test_manipulation_lowers_mean_nll(corpus_model, corpus_dir):
    dataset = PatchDataset(corpus_dir, 16)
    rng = Rng(44)
    x = dequantize(sample_patches(dataset, 1000, rng), rng)
    up = manipulate_patch(x, 0.6, corpus_model)
    nll = -np.asarray(log_likelihood(x, corpus_model)).mean()
    nll_up = -np.asarray(log_likelihood(up, corpus_model)).mean()
    assert nll_up <= nll
