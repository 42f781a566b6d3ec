import numpy as np
import pytest
import torch
import torch.nn as nn

from vflab.nets import Fcnn, build_top
from vflab.partition import partition_features
from vflab.protocol import (
    EmbeddingBatch,
    Participant,
    Server,
    VflClassifier,
    backward_round,
    forward_round,
)
from vflab.validation import ConfigurationError, ProtocolError


def _split_setup(X, y, widths=(10, 10), emb=6, lr=0.0, momentum=0.0, seed=0):
    torch.manual_seed(seed)
    parts = partition_features((X.shape[1],), len(widths), list(widths))
    Xt = torch.as_tensor(X)
    participants = [
        Participant(p, Fcnn(p.width, emb, hidden=16, n_layers=3),
                    p.extract(Xt).clone(), lr=lr, momentum=momentum)
        for p in parts
    ]
    top = build_top("fcnn3", emb * len(widths), len(np.unique(y)), hidden=16)
    server = Server(top, y, emb * len(widths), lr=lr, momentum=momentum)
    return participants, server


class _Monolithic(nn.Module):
    """Oracle: the same layers composed directly into one network."""

    def __init__(self, participants, server):
        super().__init__()
        import copy

        self.bottoms = nn.ModuleList([copy.deepcopy(p.bottom) for p in participants])
        self.top = copy.deepcopy(server.top)
        self.ranges = [(p.partition.start, p.partition.stop) for p in participants]

    def forward(self, x):
        embs = [b(x[:, a:b_]) for b, (a, b_) in zip(self.bottoms, self.ranges)]
        return self.top(torch.cat(embs, dim=1))


def test_split_matches_monolithic_forward_and_gradients(synth):
    X, y = synth.train_X[:64], synth.train_y[:64]
    participants, server = _split_setup(X, y)
    mono = _Monolithic(participants, server)

    idx = np.arange(64)
    logits = forward_round(participants, server, idx, "train")
    loss, kept = backward_round(server, participants, logits,
                                torch.as_tensor(y, dtype=torch.long))
    assert kept.all()

    x_full = torch.as_tensor(X)
    mono_logits = mono(x_full)
    mono_loss = torch.nn.functional.cross_entropy(
        mono_logits, torch.as_tensor(y, dtype=torch.long))
    mono_loss.backward()

    assert torch.allclose(logits, mono_logits, rtol=1e-6, atol=1e-7)
    assert loss == pytest.approx(float(mono_loss), rel=1e-6)
    for p, mono_bottom in zip(participants, mono.bottoms):
        for g1, g2 in zip(p.bottom.parameters(), mono_bottom.parameters()):
            assert torch.allclose(g1.grad, g2.grad, rtol=1e-6, atol=1e-9)
    for g1, g2 in zip(server.top.parameters(), mono.top.parameters()):
        assert torch.allclose(g1.grad, g2.grad, rtol=1e-6, atol=1e-9)


def test_no_participant_sees_others_embeddings(synth):
    # messages are detached: backward through a message must not reach the bottoms
    X, y = synth.train_X[:8], synth.train_y[:8]
    participants, server = _split_setup(X, y)
    message = participants[0].embed(np.arange(8), "train")
    assert not message.requires_grad


def test_embedding_dim_mismatch_is_configuration_error(synth):
    X, y = synth.train_X[:8], synth.train_y[:8]
    participants, server = _split_setup(X, y)
    server.expected_input_dim += 1
    with pytest.raises(ConfigurationError, match="top-model input"):
        forward_round(participants, server, np.arange(8), "train")


def test_gradient_shape_mismatch_is_protocol_error(synth):
    X, y = synth.train_X[:8], synth.train_y[:8]
    participants, _ = _split_setup(X, y)
    participants[0].embed(np.arange(8), "train")
    with pytest.raises(ProtocolError, match="gradient shape"):
        participants[0].apply_gradient(torch.zeros(8, 3))


def test_backward_without_forward_is_protocol_error(synth):
    X, y = synth.train_X[:8], synth.train_y[:8]
    participants, server = _split_setup(X, y)
    with pytest.raises(ProtocolError):
        backward_round(server, participants, torch.zeros(8, 4),
                       torch.as_tensor(y, dtype=torch.long))


def test_misaligned_embedding_batch_rejected(synth):
    X, y = synth.train_X[:8], synth.train_y[:8]
    participants, server = _split_setup(X, y)
    batch = EmbeddingBatch(
        sample_indices=np.arange(8),
        embeddings={0: torch.zeros(8, 6), 1: torch.zeros(7, 6)},
    )
    with pytest.raises(ProtocolError, match="rows"):
        server.forward(batch)


def test_attack_without_adversary_is_configuration_error(synth):
    from vflab.attacks import VillainAttack

    clf = VflClassifier(attack=VillainAttack(), adversary=None, epochs=1)
    with pytest.raises(ConfigurationError, match="malicious"):
        clf.fit(synth.train_X[:50], synth.train_y[:50])


def test_fixed_seed_reproduces_first_epoch_loss(synth):
    kwargs = dict(n_participants=2, embedding_dim=8, hidden=32, epochs=1,
                  batch_size=64, seed=11)
    a = VflClassifier(**kwargs).fit(synth.train_X, synth.train_y)
    b = VflClassifier(**kwargs).fit(synth.train_X, synth.train_y)
    assert a.history_[0]["train_loss"] == b.history_[0]["train_loss"]
    assert a.metrics_.f1 == b.metrics_.f1


def test_fit_learns_synthetic_blobs(synth):
    clf = VflClassifier(n_participants=2, embedding_dim=8, hidden=32, epochs=8,
                        batch_size=64, lr=0.1, seed=0)
    clf.fit(synth.train_X, synth.train_y, eval_set=(synth.test_X, synth.test_y))
    assert clf.metrics_.f1 > 0.9
    assert len(clf.history_) == 8
    preds = clf.predict(synth.test_X)
    assert preds.shape == synth.test_y.shape


def test_three_participants_and_unequal_split(synth):
    clf = VflClassifier(n_participants=3, split_spec=[4, 6, 10], embedding_dim=4,
                        hidden=16, epochs=2, batch_size=64, seed=0)
    clf.fit(synth.train_X, synth.train_y, eval_set=(synth.test_X, synth.test_y))
    assert [p.partition.width for p in clf.participants_] == [4, 6, 10]


class _AuditAttack:
    """Records everything the protocol hands to the malicious side."""

    name = "audit"
    known_labels = None
    start_epoch = 1
    snapshot_epoch = None

    def __init__(self):
        self.seen_features = []
        self.seen_embeddings = []
        self.view = None

    def build(self, view):
        self.view = view
        attack = self

        class Adapter:
            armed = False
            poison_mask_ = None
            mean_perturbation_ = None
            surrogate_ = None
            poisoned_indices_ = np.empty(0, dtype=np.int64)

            def on_epoch_start(self, epoch):
                pass

            def active(self, epoch):
                return True

            def poison_features(self, x, indices, epoch):
                attack.seen_features.append(x.detach().clone())
                return x

            def poison_embeddings(self, e, indices, epoch):
                attack.seen_embeddings.append(e.detach().clone())
                return e

        return Adapter()


def test_information_isolation_audit(synth):
    # unequal split so honest tensors have a distinctive width
    audit = _AuditAttack()
    clf = VflClassifier(n_participants=2, split_spec=[8, 12], adversary=0,
                        attack=audit, embedding_dim=5, hidden=16, epochs=2,
                        batch_size=50, seed=0)
    clf.fit(synth.train_X, synth.train_y)

    # the view exposes only the adversary's own state
    assert audit.view.local_features.shape[1] == 8
    assert audit.view.known_labels is None
    view_fields = set(vars(audit.view))
    assert "labels" not in view_fields and "server" not in view_fields

    adv_local = torch.as_tensor(synth.train_X[:, :8])
    honest_local = synth.train_X[:, 8:]
    for x in audit.seen_features:
        assert x.shape[1] == 8  # never the honest 12-wide slice
        # every row it saw is exactly one of its own local rows
        matches = (x[:, None, :] == adv_local[None, :, :]).all(dim=2).any(dim=1)
        assert bool(matches.all())
    for e in audit.seen_embeddings:
        assert e.shape[1] == 5  # its own embedding width only
    assert honest_local.shape[1] == 12
