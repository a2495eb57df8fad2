import numpy as np
import pytest

from formulanet import autograd as ag
from formulanet.data import HolStepData, SplitManifest, batch_stream
from formulanet.graph import build_graph
from formulanet.hol import close_formula, parse_formula
from formulanet.model import (
    ModelConfig,
    ModelParams,
    Vocabulary,
    VocabMismatch,
    forward_pairs,
    load_checkpoint,
    save_checkpoint,
    supervision_loss,
)
from formulanet.synth import write_synthetic_corpus
from formulanet.train import (
    NodeOutOfRange,
    TrainRunConfig,
    ablation_run,
    evaluate,
    evaluate_checkpoint,
    nearest_neighbors,
    open_data,
    read_config_file,
    train,
)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    train_files, test_files = write_synthetic_corpus(root, n_train=12, n_test=2, pairs_per_conjecture=16, seed=3)
    return root, train_files, test_files


def tiny_run(corpus, out_dir=None, **kw):
    root, _, _ = corpus
    opts = dict(dim=8, steps=1, epochs=1, batch_size=8, n_val=4, train_dir=str(root / "train"),
                test_dir=str(root / "test"), dtype="float64", out_dir=str(out_dir or ""))
    opts.update(kw)
    return TrainRunConfig(**opts)


def full_loss(params, vocab, data, split="train"):
    total = 0.0
    for b in batch_stream(data, split, 10_000, shuffle=False, setting=params.config.setting):
        logits = forward_pairs(ag.Tape(record=False), params, vocab, b.conjectures, b.statements, training=True)
        total += float(supervision_loss(logits, b.labels).value)
    return total


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    run = tiny_run(corpus, out, epochs=1)
    result = train(run)
    return run, result, open_data(run)


class TestConfig:
    def test_lr_schedule(self):
        run = TrainRunConfig(lr=0.001)
        assert run.lr_at(0) == 0.001
        assert run.lr_at(3) == pytest.approx(0.001 / 27, rel=1e-15)

    def test_config_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# comment\ndim = 16\norder_preserving=true  # trailing\nlr=0.01\n\n")
        run = TrainRunConfig.from_dict(read_config_file(path))
        assert (run.dim, run.order_preserving, run.lr) == (16, True, 0.01)

    def test_round_trip(self, tmp_path):
        run = TrainRunConfig(dim=7, setting="unconditional", mode="tree-renamed")
        path = tmp_path / "c"
        path.write_text(run.dumps())
        assert TrainRunConfig.from_dict(read_config_file(path)) == run

    def test_unknown_key(self):
        with pytest.raises(KeyError):
            TrainRunConfig.from_dict({"learning_rate": "1"})

    def test_bad_line(self, tmp_path):
        path = tmp_path / "c"
        path.write_text("dim 16\n")
        with pytest.raises(ValueError):
            read_config_file(path)


class TestTrain:
    def test_one_epoch_reduces_loss(self, corpus):
        root, train_files, _ = corpus
        # 4 conjectures x 16 pairs = 64 pairs
        manifest = SplitManifest([str(f) for f in train_files[:4]], [], [])
        data = HolStepData(manifest)
        run = tiny_run(corpus, epochs=1, lr=0.003)
        vocab = data.build_vocab("train")
        initial = ModelParams.init(run.model_config(len(vocab)), seed=run.seed)
        result = train(run, data)
        assert len(data.pairs("train")) == 64
        assert full_loss(result.params, vocab, data) < full_loss(initial, vocab, data)

    def test_outputs(self, corpus, tmp_path):
        run = tiny_run(corpus, tmp_path, epochs=2)
        result = train(run)
        names = {p.name for p in tmp_path.iterdir()}
        assert {"epoch1.fnet", "epoch2.fnet", "last.fnet", "best.fnet", "metrics.log"} <= names
        lines = (tmp_path / "metrics.log").read_text().splitlines()
        assert lines[0].startswith("epoch=1 lr=")
        assert "val_acc_step1=" in lines[1]
        assert lines[-1].startswith("final=test")
        assert result.metrics.records[1]["lr"] == pytest.approx(run.lr / 3)

    def test_deterministic(self, corpus):
        a = train(tiny_run(corpus)).metrics.lines(include_wall=False)
        b = train(tiny_run(corpus)).metrics.lines(include_wall=False)
        assert a == b

    def test_overfit_tiny_model(self, corpus):
        root, train_files, _ = corpus
        data = HolStepData(SplitManifest([str(f) for f in train_files[:3]], [], []))
        run = tiny_run(corpus, dim=16, epochs=8, lr=0.003, lr_decay=1.0, batch_size=8)
        result = train(run, data)
        assert evaluate(result.params, result.vocab, data, "train")[-1] > 0.95


class TestEvaluate:
    def test_checkpoint_round_trip(self, trained, tmp_path):
        run, result, data = trained
        path = tmp_path / "c.fnet"
        save_checkpoint(path, result.params, result.vocab)
        params, vocab, _, _ = load_checkpoint(path)
        assert vocab == result.vocab
        for k, v in result.params.arrays.items():
            np.testing.assert_array_equal(params.arrays[k], v)
        assert evaluate(params, vocab, data, "val") == evaluate(result.params, result.vocab, data, "val")

    def test_checkpoint_keeps_optimizer_state(self, trained):
        run, result, _ = trained
        _, _, opt, meta = load_checkpoint(result.last_checkpoint)
        assert opt.step > 0 and opt.acc
        assert meta["run"]["dim"] == run.dim

    def test_vocab_mismatch(self, trained, tmp_path):
        run, result, data = trained
        path = tmp_path / "other.fnet"
        other = Vocabulary(["ONLY_THIS"])
        save_checkpoint(path, ModelParams.init(run.model_config(len(other))), other)
        with pytest.raises(VocabMismatch):
            evaluate_checkpoint(path, data, "val")

    def test_accuracy_per_head(self, trained):
        run, result, data = trained
        accs = evaluate(result.params, result.vocab, data, "val")
        assert len(accs) == run.steps + 1
        assert all(0.0 <= a <= 1.0 for a in accs)

    def test_unconditional_ignores_conjectures(self, corpus):
        run = tiny_run(corpus, setting="unconditional")
        data = open_data(run)
        result = train(run, data)
        before = evaluate(result.params, result.vocab, data, "val")
        other = build_graph(close_formula(parse_formula("!q. Z q")))
        data.conjecture_graph = lambda rec: other
        assert evaluate(result.params, result.vocab, data, "val") == before

    def test_ablation_full_mode_rename_equal(self, trained):
        run, result, data = trained
        assert ablation_run(result.params, result.vocab, data, "original") == ablation_run(
            result.params, result.vocab, data, "renamed"
        )

    def test_ablation_unknown_variant(self, trained):
        run, result, data = trained
        with pytest.raises(ValueError):
            ablation_run(result.params, result.vocab, data, "shuffled")


class TestNearestNeighbors:
    def setup_method(self):
        self.vocab = Vocabulary(["!", "?", "/\\", "P", "Q"])
        self.params = ModelParams.init(ModelConfig(len(self.vocab), dim=6, steps=1, dtype="float64"), seed=2)
        self.g = build_graph(close_formula(parse_formula("!x. ?y. P x /\\ Q x y")))

    def test_self_match_first(self):
        other = build_graph(close_formula(parse_formula("!z. P z")))
        hits = nearest_neighbors(self.params, self.vocab, (self.g, 3), [other, self.g], k=3)
        assert hits[0][:2] == (1, 3)
        assert hits[0][2] == 0.0

    def test_isomorphic_contexts(self):
        g = build_graph(close_formula(parse_formula("(!x. P x) /\\ (!y. P y)")))
        a, b = [i for i, n in enumerate(g.names) if n == "VAR"]
        hits = nearest_neighbors(self.params, self.vocab, (g, a), [g], k=g.n_nodes, step=1)
        dist = {node: d for _, node, d in hits}
        assert dist[b] == 0.0

    def test_k_larger_than_corpus(self):
        hits = nearest_neighbors(self.params, self.vocab, (self.g, 0), [self.g], k=100)
        assert len(hits) == self.g.n_nodes

    def test_node_out_of_range(self):
        with pytest.raises(NodeOutOfRange):
            nearest_neighbors(self.params, self.vocab, (self.g, 99), [self.g])

    def test_step_out_of_range(self):
        with pytest.raises(ValueError):
            nearest_neighbors(self.params, self.vocab, (self.g, 0), [self.g], step=2)
