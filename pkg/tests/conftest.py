import json

import pytest

# small enough that every pipeline stage runs in seconds on one CPU
TINY_RUN = {
    "curation": {"canvas_size": 32, "fg_size": 16},
    "denoiser": {"d_model": 32, "depth": 2, "heads": 2, "time_dim": 16},
    "fusion": {"n_latents": 4, "d_latent": 16, "d_out": 16},
    "lora": {"rank": 2, "max_trainable_ratio": 0.9},
    "pretrain": {"iterations": 30, "batch_size": 2, "log_every": 0},
    "adapt": {"iterations": 20, "batch_size": 2, "log_every": 0},
    "metrics": {"steps": 4, "feature_size": 8},
    "probe": {"k_values": [64, 128, 256], "repeats": 2, "n_tok": 16, "batch": 2},
}


@pytest.fixture
def tiny_run_dict():
    return json.loads(json.dumps(TINY_RUN))


@pytest.fixture
def tiny_config_path(tmp_path, tiny_run_dict):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(tiny_run_dict))
    return path


@pytest.fixture
def tiny_config(tiny_run_dict):
    from layersplit.config import from_dict

    return from_dict(tiny_run_dict).resolved().validate()


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
