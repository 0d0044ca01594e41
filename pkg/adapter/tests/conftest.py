import sys

import pytest

from bimark.prf import WatermarkKey
from bimark.profiles import DetectionProfile

KEY_INT = 271828


@pytest.fixture(scope="session")
def profile():
    return DetectionProfile(
        key=WatermarkKey.from_int(KEY_INT), vocab_size=64, d=6, ell=8, h=2,
        delta_base=1.0,
    )


@pytest.fixture(scope="session")
def profile_path(tmp_path_factory, profile):
    path = tmp_path_factory.mktemp("profiles") / "serve.profile"
    profile.save(path)
    return path


@pytest.fixture
def serve_argv(profile_path):
    return [sys.executable, "-m", "bimark", "serve", "--profile", str(profile_path)]
