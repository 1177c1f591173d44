import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from biaxcontour.cli import build_sets  # noqa: E402
from biaxcontour.config import load_config  # noqa: E402


@pytest.fixture(scope="session")
def out_root(request):
    """Output root kept in the pytest cache so the offline sets survive between sessions."""
    return Path(request.config.cache.mkdir("biaxcontour"))


@pytest.fixture(scope="session")
def make_cfg(out_root):
    def make(*overrides):
        return load_config(None, [f"output={out_root}", "synthesis.samples=0", "synthesis.workers=1",
                                  *overrides])
    return make


@pytest.fixture(scope="session")
def bundle(make_cfg):
    """Default offline sets (built on first use, about two minutes)."""
    return build_sets(make_cfg())[0]
