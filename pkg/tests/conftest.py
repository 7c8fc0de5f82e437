"""Shared fixtures: toy bundles, adapters, calibration data, profiles."""

import numpy as np
import pytest

import onegraph as og
from onegraph import modelspec as ms
from onegraph import quant as qt

TOY_MODEL = """
name toy
steps 2
seed 7
input 6
cond 2
latent 4
section encoder
dense 4 silu
section backbone
lora 8 relu rank=2
lora 4 none rank=2
section decoder
dense 6 none
"""

# single-step, smooth-activation net used by the distillation tests
TWOLAYER_MODEL = """
name twolayer
steps 1
seed 5
input 4
cond 2
latent 4
section backbone
lora 6 silu rank=2
lora 4 none rank=2
section decoder
dense 4 none
"""


@pytest.fixture(scope="session")
def toy_bundle():
    return ms.build_bundle(ms.parse_model_spec(TOY_MODEL))


@pytest.fixture(scope="session")
def toy_adapter(toy_bundle):
    return ms.build_adapter(
        toy_bundle, ms.AdapterSpec("style", seed=11, rank=2, alpha=1.0, amplitude=0.4))


@pytest.fixture(scope="session")
def toy_samples(toy_bundle):
    return ms.make_samples(toy_bundle, 4, 99)


@pytest.fixture(scope="session")
def toy_profile(toy_bundle, toy_adapter, toy_samples):
    return og.calibrate(toy_bundle, toy_samples, og.Policy("w8a16"),
                        adapter=toy_adapter, lora_bits=16, seed=0)


@pytest.fixture(scope="session")
def twolayer_bundle():
    return ms.build_bundle(ms.parse_model_spec(TWOLAYER_MODEL))


@pytest.fixture(scope="session")
def twolayer_adapter(twolayer_bundle):
    return ms.build_adapter(
        twolayer_bundle, ms.AdapterSpec("task", seed=13, rank=2, alpha=1.0, amplitude=0.6))


@pytest.fixture(scope="session")
def twolayer_samples(twolayer_bundle):
    return ms.make_samples(twolayer_bundle, 4, 42)


def copy_adapter(adapter, new_id=None):
    entries = {nid: og.LoRAEntry(e.A.copy(), e.B.copy(), e.alpha)
               for nid, e in adapter.entries.items()}
    return og.LoRAAdapter(new_id or adapter.adapter_id, entries)


def all16_profile(bundle, span=8.0):
    """Diagnostic profile: every tensor 16-bit over a generous range."""
    prof = og.QuantProfile(policy=og.Policy("w8a16"), lora_bits=16)
    for key in qt.required_keys(bundle):
        params = og.compute_quant_params(-span, span, 16)
        if ".a." in key:
            prof.act_params[key] = params
        else:
            prof.weight_params[key] = params
    return prof


def widened_profile(calibrated, mult=1.3, lora_bits=16):
    """Calibrated ranges scaled by `mult`: headroom without coarse quanta."""
    prof = og.QuantProfile(policy=calibrated.policy, lora_bits=lora_bits)
    for k, p in calibrated.act_params.items():
        w = max(abs(p.repr_lo), abs(p.repr_hi)) * mult
        prof.act_params[k] = og.compute_quant_params(-w, w, 16)
    for k, p in calibrated.weight_params.items():
        w = max(abs(p.repr_lo), abs(p.repr_hi)) * mult
        prof.weight_params[k] = og.compute_quant_params(-w, w, 16 if ".lora." in k else 8)
    return prof


def rel_err(a, b):
    scale = max(float(np.max(np.abs(b))), 1e-30)
    return float(np.max(np.abs(a.astype(np.float64) - b.astype(np.float64)))) / scale
