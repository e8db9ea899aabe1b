"""Source-free time-series domain adaptation with temporal recovery."""

import json
from pathlib import Path

from . import _temsr
from ._temsr import coral, entropy, extract_segments, gradient_checks, macro_f1, oracle_checks

__all__ = [
    "default_config", "generate", "extract_segments", "entropy", "macro_f1", "coral",
    "gradient_check", "oracle_check", "gradient_checks", "oracle_checks",
    "pretrain", "adapt", "ablate", "sweep", "verify", "report", "rerun",
]


def _text(config):
    return "" if config is None else json.dumps(config)


def default_config():
    """The shipped experiment configuration as a dict."""
    return json.loads(_temsr.default_config())


def generate(config=None, seed=0):
    """Synthetic domain pair as {split: (x[count, channels, length], labels)}."""
    return _temsr.generate(_text(config), seed)


def gradient_check(name, tolerance=1e-4):
    return json.loads(_temsr.gradient_check(name, tolerance))


def oracle_check(name, trials=100, tolerance=1e-7):
    return json.loads(_temsr.oracle_check(name, trials, tolerance))


def pretrain(out, config=None):
    train, heldout, target = _temsr.pretrain(_text(config), Path(out))
    return {"train_mf1": train, "heldout_mf1": heldout, "target_mf1": target}


def adapt(out, config=None, source_ckpt=None):
    src, final, frozen = _temsr.adapt(
        _text(config), Path(out), None if source_ckpt is None else Path(source_ckpt))
    return {"src_only_mf1": src, "final_mf1": final, "source_frozen": frozen}


def ablate(out, variants, seeds, config=None):
    rows = _temsr.ablate(_text(config), list(variants), list(seeds), Path(out))
    return [dict(zip(("variant", "seed", "src_only_mf1", "mf1"), r)) for r in rows]


def sweep(out, param, seeds, values=(), config=None):
    rows = _temsr.sweep(_text(config), param, list(values), list(seeds), Path(out))
    return [dict(zip(("value", "seed", "src_only_mf1", "mf1"), r)) for r in rows]


def verify(out, suites=("gradients", "oracles"), seeds=(1, 2, 3), config=None):
    ok, docs = _temsr.verify(_text(config), list(suites), list(seeds), Path(out))
    return ok, [json.loads(d) for d in docs]


def report(run_dir):
    _temsr.report(Path(run_dir))


def rerun(run_dir, out):
    _temsr.rerun(Path(run_dir), Path(out))
