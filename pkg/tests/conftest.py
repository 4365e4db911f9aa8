import numpy as np
import pytest

from mmim.data import SynthConfig, generate_paired
from mmim.mim import MimConfig, MimModel
from mmim.vit import VitConfig


def tiny_vit(**overrides) -> VitConfig:
    base = dict(depth=1, heads=2, width=16, mlp_ratio=2.0, patch_size=4,
                decoder_depth=1, decoder_width=8, decoder_heads=2)
    base.update(overrides)
    return VitConfig(**base)


def tiny_model(mode="unimodal", size=8, seed=0, **vit) -> MimModel:
    mods = ("oct",) if mode == "unimodal" else ("oct", "ir")
    cfg = MimConfig(vit=tiny_vit(**vit), decoder_mode=mode, modalities=mods,
                    image_sizes=tuple((size, size) for _ in mods))
    return MimModel(cfg, seed=seed)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    generate_paired(SynthConfig(num_patients=12, visits_per_patient=2, seed=3), out)
    return out


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion; the summary prints them all."""
    def report(number: int, text: str, ok: bool) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {text}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
