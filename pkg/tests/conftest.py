import hashlib
import os
from pathlib import Path

import numpy as np
import pytest

import explicit_mpc

PKG_DIR = Path(explicit_mpc.__file__).parent
CACHE_DIR = Path(os.environ.get("EXPLICIT_MPC_CACHE", Path(__file__).parent / ".cache"))

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def source_digest(*modules) -> str:
    h = hashlib.sha256()
    for m in modules:
        h.update((PKG_DIR / m).read_bytes())
    return h.hexdigest()[:12]


@pytest.fixture(scope="session")
def cstr_config():
    from explicit_mpc.config import load_config

    return load_config("cstr")


@pytest.fixture(scope="session")
def cstr_dataset(cstr_config):
    """Full-size CSTR dataset with its train/test split.

    Generation takes minutes, so the result is cached under a key built from
    the config and the sources that determine it.
    """
    from explicit_mpc.config import config_hash
    from explicit_mpc.experiments import cstr_problem_from_config, cstr_sampling_from_config
    from explicit_mpc.sampling import PolicyDataset, generate_cstr_dataset, split

    cfg = cstr_config
    key = config_hash({k: cfg[k] for k in ("seed", "problem", "sampling", "split")})
    key += "-" + source_digest("_kernels.py", "dynamics.py", "mpc.py", "sampling.py")
    path = CACHE_DIR / f"cstr-{key}.csv"
    if path.exists():
        return PolicyDataset.load(path)
    import time

    t0 = time.perf_counter()
    ds = generate_cstr_dataset(cstr_sampling_from_config(cfg), cstr_problem_from_config(cfg),
                               n_jobs=os.cpu_count() or 1)
    ds.meta["generation_seconds"] = time.perf_counter() - t0
    split(ds, cfg["split"]["n_train"], seed=cfg["seed"])
    CACHE_DIR.mkdir(parents=True, exist_ok=True)
    ds.save(path)
    return ds


@pytest.fixture(scope="session")
def cstr_fits(cstr_config, cstr_dataset):
    """Embedding and every pipeline per parametrization, fitted once per session."""
    from explicit_mpc.pipeline import embed_cstr, fit_cstr_pipelines
    from explicit_mpc.sampling import augment_dataset

    cfg, ds = cstr_config, cstr_dataset
    e, tr = cfg["embedding"], cstr_dataset.train_idx
    out = {}
    for tag in cfg["fit"]["parametrizations"]:
        X = augment_dataset(ds, tag)
        emb = embed_cstr(X[tr], ds.U_star[tr], tag, e["policy_prefix"], e["c_in"], e["c_fn"], e["n_eigs"],
                         e["llr_threshold"], seed=cfg["seed"])
        out[tag] = fit_cstr_pipelines(ds, tag, e["policy_prefix"], cfg["fit"]["mlp_epochs"], seed=cfg["seed"],
                                      embedding=emb)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
