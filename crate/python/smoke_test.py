"""Smoke test for the sourcefree Python extension.

Build and install first:
    pip install --no-build-isolation -e crates/python
"""

import os
import tempfile

import sourcefree as sf


def main():
    source = sf.Dataset.synthetic("source", "train", n_per_class=30, image_size=12)
    target = sf.Dataset.synthetic("target", "train", n_per_class=30, image_size=12)
    target_test = sf.Dataset.synthetic("target", "test", n_per_class=30, image_size=12)
    assert len(source) == 300 and source.image_shape == (3, 12, 12), source

    model = sf.Classifier.train(source, epochs=6, batch_size=32)
    before = model.state_hash
    no_da = model.evaluate(target_test)

    gen, losses = sf.Generator.train(target, model, epochs=2, batch_size=32, lr=1e-3)
    assert len(losses) == 2 and all(len(row) == 4 for row in losses)
    translated = model.evaluate(target_test, gen)
    assert target.label_reads == 0, "generator training read target labels"
    assert model.state_hash == before, "classifier changed during generator training"

    pixels, shape = gen.translate(target_test)
    assert shape[0] == len(target_test) and all(0.0 <= v <= 1.0 for v in pixels)

    adapted = sf.adabn(model, target)
    idx, labels, conf = sf.mine_pseudo_labels(model, target, gen, threshold=0.5)
    assert all(c > 0.5 for c in conf)
    assert target.label_reads == 0

    sig = sf.paired_t([0.9, 0.92, 0.91], [0.8, 0.83, 0.8])
    assert 0.0 <= sig.p_value <= 1.0 and sig.df == 2

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "classifier.ckpt")
        digest = model.save(path)
        assert len(digest) == 64
        assert sf.Classifier.load(path).state_hash == before
        assert sf.run_cli(["adapt", "--target", "synth"]) == 2

    try:
        sf.Dataset.synthetic("source", shift="no_such_shift")
    except ValueError:
        pass
    else:
        raise AssertionError("bad shift accepted")

    print(
        f"no-DA {no_da:.3f}  translated {translated:.3f}  adabn {adapted.evaluate(target_test):.3f}  "
        f"pseudo labels {len(idx)}  p={sig.p_value:.4f}"
    )
    print("smoke test passed")


if __name__ == "__main__":
    main()
