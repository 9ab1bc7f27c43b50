import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from deepcut.bench import emit_reports, run_benchmark  # noqa: E402
from deepcut.data import PRESETS, build_vocab_and_encode, generate_synthetic  # noqa: E402
from deepcut.engines import TrainConfig  # noqa: E402

WNUT_SEEDS = (0, 1, 2, 3, 4)


@pytest.fixture(scope="session")
def tiny_ds():
    return build_vocab_and_encode(generate_synthetic(PRESETS["tiny"], 0))


@pytest.fixture(scope="session")
def wnut_bench(tmp_path_factory):
    """Five-seed benchmark at WNUT16 scale with 10% forgotten; about 20 CPU minutes, shared."""
    start = time.perf_counter()
    ds = build_vocab_and_encode(generate_synthetic(PRESETS["wnut16-scale"], 0, name="wnut16-scale"))
    result = run_benchmark(ds, [0.10], ["retrain", "finetune", "revgrad", "deepcut"], WNUT_SEEDS, TrainConfig())
    secs = time.perf_counter() - start
    out = tmp_path_factory.mktemp("wnut-bench")
    emit_reports(result, out)
    return result, secs, out
