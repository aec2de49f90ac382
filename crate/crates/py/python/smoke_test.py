"""Smoke test for the hardneg_py extension module."""

import math
import os
import sys
import tempfile

import hardneg_py as hn


def main() -> int:
    with tempfile.TemporaryDirectory() as tmp:
        train = os.path.join(tmp, "train.tsv")
        n = hn.synthetic_corpus(train, dialogues=200, seed=7)
        assert n == 400, n

        lm = hn.NGramModel.train(train, order=3)
        assert lm.order == 3
        assert lm.vocab_size > 4

        dist = lm.next_token_dist([1, 1])
        assert len(dist) == lm.vocab_size
        assert abs(sum(dist) - 1.0) < 1e-9

        log_prob, ppl = lm.score(["hello there"], "hello there")
        assert log_prob < 0.0 and math.isfinite(ppl) and ppl > 1.0

        path = os.path.join(tmp, "lm.bin")
        lm.save(path)
        again = hn.NGramModel.load(path)
        assert again.next_token_dist([1, 1]) == dist

        out = os.path.join(tmp, "aug.tsv")
        summary = hn.augment(train, lm, out, seed=3)
        assert summary["contexts"] == 200, summary
        assert summary["examples"] == 600, summary
        assert os.path.getsize(out) > 0

        m = hn.metrics([[(0.9, True), (0.1, False)], [(0.2, True), (0.8, False)]])
        assert abs(m["R1"] - 0.5) < 1e-12, m
        assert abs(m["MRR"] - 0.75) < 1e-12, m
        assert m["contexts_evaluated"] == 2

        try:
            hn.NGramModel.load(os.path.join(tmp, "missing.bin"))
        except OSError:
            pass
        else:
            raise AssertionError("missing model file should raise OSError")

    print(f"hardneg_py {hn.__version__}: smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
