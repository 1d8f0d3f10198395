"""Shared fixtures plus the acceptance summary printed at the end of a run."""

CRITERIA = {
    1: "bitrate identity",
    2: "gradient suite",
    3: "RVQ invariants",
    4: "CTC oracle equivalence",
    5: "two-stage training trend",
    6: "two-channel vs single-channel",
    7: "metric sanity",
    8: "determinism",
}

# criterion -> list of (ok, detail) parts recorded by tests/test_acceptance.py
ACCEPTANCE: dict[int, list[tuple[bool, str]]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE.setdefault(criterion, []).append((bool(ok), detail))
    print(f"{'PASS' if ok else 'FAIL'} [{criterion}] {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key, name in CRITERIA.items():
        parts = ACCEPTANCE.get(key)
        if parts is None:
            terminalreporter.write_line(f"SKIP criterion {key} ({name}): not run")
            continue
        verdict = "PASS" if all(ok for ok, _ in parts) else "FAIL"
        detail = "; ".join(("" if ok else "FAILED ") + d for ok, d in parts)
        terminalreporter.write_line(f"{verdict} criterion {key} ({name}): {detail}")


TINY_INI = """\
[run]
seed = 3

[data]
root = {root}
n_train = 6
n_dev = 2
n_test = 2

[encoder]
d_model = 8
n_layers = 1
n_heads = 2
n_mels = 16

[adapter]
d_model = 8
ffn_dim = 16
n_heads = 2

[rvq]
num_layers = 2
codebook_size = 8
dim = 4

[decoder]
vocos_layers = 1
vocos_dim = 8
llm_dim = 8
llm_layers = 1
llm_heads = 2

[discriminator]
mpd_periods = 2,3
msd_scales = 1
stftd_fft_sizes = 256
channels = 4

[pretrain]
steps = 3
batch_size = 2
max_seconds = 0.8
log_every = 1
kmeans_batches = 2
lm_warmup_steps = 2

[posttrain]
steps = 2
batch_size = 2
segment_seconds = 0.16
log_every = 1

[probe]
steps = 2
hidden = 8
"""


def write_tiny_ini(tmp_path, name="tiny.ini"):
    path = tmp_path / name
    path.write_text(TINY_INI.format(root=tmp_path / "data"))
    return path
