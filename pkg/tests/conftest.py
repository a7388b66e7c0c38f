import numpy as np
import pytest

from cogstruct.dataset import InteractionDataset, InteractionEvent, QMatrix


def events(sid, rows, start=0):
    return [InteractionEvent(sid, q, r, start + i) for i, (q, r) in enumerate(rows)]


@pytest.fixture
def sine_cosine():
    """Five questions on two concepts (sine, cosine) with mixed responses."""
    qm = QMatrix(np.array([[1.0, 0.0], [1.0, 0.0], [0.5, 0.5], [0.5, 0.5], [1.0, 0.0]]))
    hist = events("s", [(0, 1), (1, 1), (2, 1), (3, 0), (4, 0)])
    return hist, qm


@pytest.fixture
def tiny_dataset():
    qm = QMatrix(np.array([[1, 0, 0], [0, 1, 0], [1, 1, 0], [0, 1, 1], [1, 1, 1]], dtype=float))
    rng = np.random.default_rng(7)
    students = {}
    for i in range(6):
        sid = f"u{i}"
        students[sid] = events(sid, [(int(rng.integers(0, 5)), int(rng.integers(0, 2))) for _ in range(8)])
    return InteractionDataset(students, qm)


TINY_RUN = {
    "seed": 0,
    "synth": {"n_students": 16, "n_questions": 8, "n_concepts": 3, "seq_len": 12},
    "diffusion": {"T": 8},
    "denoiser": {"hidden_dim": 8, "n_layers": 1, "guidance_dim": 4},
    "pretrain": {"batch_size": 8, "max_steps": 10, "eval_every": 5},
    "rl": {"n_trajectories": 4, "n_timesteps": 2, "n_updates": 2, "lr": 1e-3},
    "kt": {"epochs": 2, "d_pool": 4},
    "cd": {"epochs": 2},
}


@pytest.fixture
def tiny_run():
    import copy

    return copy.deepcopy(TINY_RUN)


GATE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if GATE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(GATE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
