"""Smoke test for the emobank Python module.

Build and run:

    cargo build --release -p emobank-py --features extension-module
    cp target/release/libemobank_py.so python/emobank.so
    python3 python/smoke_test.py
"""

import math
import tempfile
from pathlib import Path

import emobank

TINY = """
[data]
identities = 2
clips_per_cell = 2
intensities = 2
[embedder]
steps = 5
batch_size = 4
negatives = 2
eval_pairs = 8
[diffusion]
steps = 5
batch_size = 2
[eval]
samples_per_emotion = 2
quartile_evals = 8
"""


def main():
    cfg = emobank.Config(TINY)
    assert len(cfg.hash()) == 64
    assert emobank.Config(cfg.to_toml()).hash() == cfg.hash()

    corpus = emobank.Corpus.generate(cfg, seed=1)
    labels = corpus.labels()
    assert len(corpus) == len(labels) > 0

    emb = emobank.Embedder.train(corpus, cfg, seed=0)
    assert len(emb.losses) == 5
    means = emb.prior_means(corpus)
    assert len(means) == len(corpus) and len(means[0]) == emb.d_s
    strength = emobank.clustering_strength(means, [l[2] for l in labels])
    assert math.isfinite(strength) and strength > 0
    assert set(emb.ablation(corpus)) == {"audio_only", "visual_only", "both"}
    coords, explained = emobank.project_2d(means)
    assert len(coords) == len(means) and explained[0] >= explained[1]

    diff = emobank.Diffusion.train(corpus, emb, cfg, seed=0)
    assert len(diff.losses) == 5
    assert len(diff.quartile_accuracy(corpus, emb, evaluations=8)) == 4
    assert 0.0 <= diff.code_purity(corpus, emb) <= 1.0
    acc, swap = diff.sample_and_score(corpus, emb, cfg, seed=3)
    assert 0.0 <= acc <= 1.0 and 0.0 <= swap <= 1.0

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        emb.save(tmp / "embedder.dceb")
        diff.save(tmp / "diffusion.dcdf")
        corpus.save(tmp / "corpus")
        assert len(emobank.Corpus.load(tmp / "corpus")) == len(corpus)
        assert emobank.Embedder.load(tmp / "embedder.dceb").d_s == emb.d_s
        emobank.Diffusion.load(tmp / "diffusion.dcdf")
        assert emobank.run_cli(["--out", str(tmp), "--bogus"]) == 1

    e = math.e
    assert abs(emobank.info_nce([1.0, 0.0], [2.0, 0.0], [[0.0, 3.0]], 1.0) + math.log(e / (e + 1))) < 1e-9
    try:
        emobank.Config("[data]\nidentites = 3\n")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown config key accepted")
    print("smoke test ok")


if __name__ == "__main__":
    main()
