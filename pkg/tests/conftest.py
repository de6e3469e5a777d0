"""Shared fixtures: synthetic device identities, UE specs and a noiseless two-user downlink."""

import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from src.datamodels import DeviceIdentity
from src.datamodels import parse_mac
from src.handover import UESpec
from src.noma_phy import ChannelRealization
from src.noma_phy import allocate_power

settings.register_profile("default", max_examples=25, deadline=None)
settings.register_profile("ci", max_examples=200, deadline=None)
settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "default"))

CONFIGS_DIR = Path(__file__).parent.parent / "configs"


@pytest.fixture
def near_identity():
    """Identity of the strong (near) UE."""
    return DeviceIdentity(
        imei="001010000000011",
        mac=parse_mac("02:00:5e:10:00:01"),
        timestamp_ms=1_717_200_000_000,
        lat_udeg=52_520_008,
        lon_udeg=13_404_954,
    )


@pytest.fixture
def far_identity():
    """Identity of the weak (far) UE."""
    return DeviceIdentity(
        imei="001010000000029",
        mac=parse_mac("02:00:5e:10:00:02"),
        timestamp_ms=1_717_200_004_321,
        lat_udeg=52_516_275,
        lon_udeg=13_377_704,
    )


@pytest.fixture
def ue_specs(near_identity, far_identity):
    """UE1 is the strong user, UE2 the weak one."""
    return [
        UESpec("UE1", near_identity, b"alpha: near-user payload", 1.0),
        UESpec("UE2", far_identity, b"secret", 0.6),
    ]


@pytest.fixture
def alloc():
    return allocate_power(1.0, 0.8)


@pytest.fixture
def noiseless_channel():
    """Gains ordered weakest first: (h_weak, h_strong)."""
    return ChannelRealization.pair(h_strong=1.0, h_weak=0.6, noise_sigma=0.0)


@pytest.fixture
def entropy():
    """Seeded byte source standing in for os.urandom."""
    return np.random.default_rng(7).bytes


@pytest.fixture
def default_config_path():
    return CONFIGS_DIR / "default.toml"


@pytest.fixture
def legacy_config_path():
    return CONFIGS_DIR / "legacy.toml"


@pytest.fixture
def scenario_text():
    """Minimal valid scenario: two UEs, every optional key left at its default."""
    return """\
seed = 42

[[ues]]
ue_id = "UE1"
imei = "001010000000011"
mac = "02:00:5e:10:00:01"
timestamp_ms = 1717200000000
lat_udeg = 52520008
lon_udeg = 13404954

[[ues]]
ue_id = "UE2"
imei = "001010000000029"
mac = "02:00:5e:10:00:02"
timestamp_ms = 1717200004321
lat_udeg = 52516275
lon_udeg = 13377704
payload = "secret"
"""


@pytest.fixture
def scenario_file(tmp_path, scenario_text):
    path = tmp_path / "scenario.toml"
    path.write_text(scenario_text)
    return path
