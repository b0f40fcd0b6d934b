import numpy as np
import pytest

from dlo.errors import ConfigError
from dlo.tasks import TaskSpec, bundled_text, generate, iter_batches


def rows(split):
    return {tuple(t) + tuple(g) for t, g in zip(split.tokens.tolist(), split.targets.tolist())}


class TestModularAddition:
    def test_example_mod_7(self):
        data = generate(TaskSpec("modular-addition", modulus=7))
        prompt = data.encode(["3", "+", "5", "="])
        for split in (data.train, data.eval):
            hits = np.flatnonzero((split.tokens == prompt).all(axis=1))
            if hits.size:
                assert data.decode([split.targets[hits[0], 3]]) == ["1"]
                break
        else:
            pytest.fail("3 + 5 not generated")

    def test_all_answers_correct(self):
        data = generate(TaskSpec(modulus=97))
        t, g = data.train.tokens, data.train.targets
        assert np.array_equal(g[:, 3], (t[:, 0] + t[:, 2]) % 97)
        assert data.train.loss_mask.sum(axis=1).tolist() == [1] * len(t)
        assert data.train.loss_mask[:, 3].all()

    def test_split_sizes_and_disjoint(self):
        data = generate(TaskSpec(modulus=97))
        assert len(data.train) + len(data.eval) == 97 * 97
        assert len(data.eval) == 940
        assert not rows(data.train) & rows(data.eval)

    def test_vocab(self):
        assert generate(TaskSpec(modulus=97)).vocab == 99
        with pytest.raises(ConfigError):
            generate(TaskSpec(modulus=97, vocab=50))

    def test_too_many_requested(self):
        with pytest.raises(ConfigError):
            generate(TaskSpec(modulus=5, n_train=30))


class TestSequenceCopy:
    def test_mask_is_second_half(self):
        data = generate(TaskSpec("sequence-copy", vocab=10, seq_len=8))
        mask = data.train.loss_mask
        assert mask[:, 4:].all() and not mask[:, :4].any()
        t, g = data.train.tokens, data.train.targets
        assert np.array_equal(g[:, 4:], t[:, :4])
        assert (t[:, 4] == 9).all()

    def test_disjoint(self):
        data = generate(TaskSpec("sequence-copy"))
        assert not rows(data.train) & rows(data.eval)

    def test_odd_length_rejected(self):
        with pytest.raises(ConfigError):
            generate(TaskSpec("sequence-copy", seq_len=7))


class TestCharLM:
    def test_bundled_text(self):
        text = bundled_text()
        assert len(text) > 3000 and "Alice" in text

    def test_windows(self):
        data = generate(TaskSpec("char-lm", seq_len=16))
        assert data.train.tokens.shape[1] == 16
        assert np.array_equal(data.train.tokens[:, 1:], data.train.targets[:, :-1])
        assert data.train.loss_mask.all()
        assert not rows(data.train) & rows(data.eval)


class TestDeterminism:
    @pytest.mark.parametrize("kind", ["modular-addition", "sequence-copy", "char-lm"])
    def test_same_seed_same_data(self, kind):
        a, b = generate(TaskSpec(kind, seed=3)), generate(TaskSpec(kind, seed=3))
        assert np.array_equal(a.train.tokens, b.train.tokens)
        assert np.array_equal(a.eval.targets, b.eval.targets)

    def test_seed_changes_split(self):
        a, b = generate(TaskSpec(seed=0)), generate(TaskSpec(seed=1))
        assert not np.array_equal(a.eval.tokens, b.eval.tokens)

    def test_batches(self):
        data = generate(TaskSpec(modulus=7))
        first = [next(iter_batches(data.train, 8, 5)).tokens for _ in range(2)]
        assert np.array_equal(first[0], first[1])
        it = iter_batches(data.train, 8, 5)
        seen = np.concatenate([next(it).tokens for _ in range(len(data.train) // 8)])
        assert len({tuple(r) for r in seen.tolist()}) == len(seen)


class TestParse:
    def test_parse(self):
        spec = TaskSpec.parse("modular-addition:modulus=7,n_eval=10")
        assert spec.modulus == 7 and spec.n_eval == 10

    @pytest.mark.parametrize("text", ["sorting", "modular-addition:modulus", "modular-addition:depth=3",
                                      "modular-addition:modulus=x"])
    def test_bad(self, text):
        with pytest.raises(ConfigError):
            TaskSpec.parse(text)
