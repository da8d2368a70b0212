"""Offline fixtures: a tiny local tokenizer, a seeded random BERT checkpoint,
and a lookup-table masked LM whose conditionals come from a designed joint.

No fixture touches the network; the pretrained-model acceptance tests skip
when no real checkpoint is resolvable.
"""

from __future__ import annotations

from types import SimpleNamespace

import numpy as np
import pytest
import torch

SPECIALS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
PAIR_TOKENS = [f"t{i}" for i in range(12)]
EXTRA_TOKENS = ["play", "##ing", "the", "man", "was", "is", "casino", "at"]
VOCAB = SPECIALS + PAIR_TOKENS + EXTRA_TOKENS  # 25 entries
PAIR_IDS = list(range(5, 17))


@pytest.fixture(scope="session")
def tokenizer():
    from transformers import BertTokenizer

    return BertTokenizer({tok: i for i, tok in enumerate(VOCAB)}, do_lower_case=False)


@pytest.fixture(scope="session")
def tiny_bert_dir(tmp_path_factory, tokenizer):
    """A randomly initialized (seeded) BERT checkpoint on disk."""
    from transformers import BertConfig, BertForMaskedLM

    torch.manual_seed(1234)
    config = BertConfig(vocab_size=len(VOCAB), hidden_size=32, num_hidden_layers=2,
                        num_attention_heads=2, intermediate_size=64,
                        max_position_embeddings=64)
    model = BertForMaskedLM(config)
    out = tmp_path_factory.mktemp("tiny-bert")
    model.save_pretrained(out)
    tokenizer.save_pretrained(out)
    return out


def designed_joint(vocab_size=len(VOCAB), diag_mass=0.7):
    """Full-vocabulary pairwise joint: heavy diagonal over the pair tokens,
    floor-level mass elsewhere, so the two positions are strongly dependent
    while both marginals stay near uniform over the pair tokens."""
    joint = np.full((vocab_size, vocab_size), 1e-9)
    n = len(PAIR_IDS)
    off = (1.0 - diag_mass) / (n * (n - 1))
    for i in PAIR_IDS:
        for j in PAIR_IDS:
            joint[i, j] = diag_mass / n if i == j else off
    return joint / joint.sum()


class PairOracleMLM(torch.nn.Module):
    """Masked LM over two-word sentences with exactly known conditionals.

    A sentence tokenizes to [CLS] w1 w2 [SEP]. The distribution returned for
    a masked position 1 is the designed joint's conditional given the token
    at position 2 (the marginal when position 2 is also masked), and
    symmetrically for position 2. Any other masked position gets a uniform
    row. Raw logits are the log probabilities plus a constant shift, so the
    logits channel differs from the log-softmax output by exactly that
    softmax-invariant constant.
    """

    def __init__(self, joint: np.ndarray, mask_id: int, shift: float = 3.0):
        super().__init__()
        self.mask_id = mask_id
        self.shift = shift
        log_joint = torch.log(torch.tensor(joint, dtype=torch.float64))
        self.register_buffer("log_cond_1_given_2", log_joint - torch.logsumexp(log_joint, 0, True))
        self.register_buffer("log_cond_2_given_1", log_joint - torch.logsumexp(log_joint, 1, True))
        self.register_buffer("log_marg_1", torch.logsumexp(log_joint, dim=1))
        self.register_buffer("log_marg_2", torch.logsumexp(log_joint, dim=0))

    def forward(self, input_ids, attention_mask=None):
        batch, length = input_ids.shape
        v = self.log_marg_1.shape[0]
        logits = torch.full((batch, length, v), -float(np.log(v)), dtype=torch.float64)
        for b in range(batch):
            for t in range(length):
                if int(input_ids[b, t]) != self.mask_id:
                    continue
                if t == 1 and length > 2:
                    partner = int(input_ids[b, 2])
                    row = self.log_marg_1 if partner == self.mask_id \
                        else self.log_cond_1_given_2[:, partner]
                elif t == 2:
                    partner = int(input_ids[b, 1])
                    row = self.log_marg_2 if partner == self.mask_id \
                        else self.log_cond_2_given_1[partner, :]
                else:
                    continue
                logits[b, t, :] = row
        return SimpleNamespace(logits=(logits + self.shift).float())


@pytest.fixture(scope="session")
def oracle_joint():
    return designed_joint()


@pytest.fixture(scope="session")
def oracle_model(oracle_joint, tokenizer):
    return PairOracleMLM(oracle_joint, tokenizer.mask_token_id).eval()


@pytest.fixture(scope="session")
def oracle_corpus(tmp_path_factory, oracle_joint):
    """Two-word sentences sampled from the designed joint."""
    rng = np.random.default_rng(7)
    flat = oracle_joint.ravel()
    v = oracle_joint.shape[0]
    lines = []
    while len(lines) < 40:
        cell = rng.choice(flat.size, p=flat)
        i, j = divmod(int(cell), v)
        if i in PAIR_IDS and j in PAIR_IDS:
            lines.append(f"{VOCAB[i]} {VOCAB[j]}")
    path = tmp_path_factory.mktemp("corpus") / "pairs.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture(scope="session")
def english_corpus(tmp_path_factory):
    """Small sentences over the tiny vocabulary for the random-BERT runs."""
    words = ["the", "man", "was", "at", "casino", "is", "play", "t0", "t1", "t2"]
    rng = np.random.default_rng(3)
    lines = [" ".join(rng.choice(words, size=rng.integers(3, 7))) for _ in range(40)]
    path = tmp_path_factory.mktemp("corpus") / "english.txt"
    path.write_text("\n".join(lines) + "\n")
    return path
