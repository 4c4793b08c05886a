"""Hierarchical encoder-decoder dialogue models with optional latent priors.

One class covers the whole family: with ``prior.family == "none"`` it is a
plain HRED; otherwise a VHRED whose prior is a unimodal Gaussian, a
K-component Gaussian mixture, or a K-variable linear Gaussian model. The
posterior is always a unimodal Gaussian.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .corpus import Utterance, Vocabulary
from .latent import (
    GaussianParams,
    LatentState,
    PriorSpec,
    mixture_mean,
    one_hot_weights,
    positive_std,
    sample_gaussian,
    sample_gmm,
    sample_lgm,
)


@dataclass
class ModelConfig:
    vocab_size: int
    hidden_size: int = 500
    num_layers: int = 1
    latent_dim: int = 200
    floor_embedding_dim: int = 30
    word_embedding_dim: int = 200
    prior: PriorSpec = field(default_factory=lambda: PriorSpec("none"))
    dropout: float = 0.2
    max_decode_len: int = 40
    init_range: float = 0.08

    def __post_init__(self):
        if isinstance(self.prior, dict):
            self.prior = PriorSpec(**self.prior)
        elif isinstance(self.prior, str):
            self.prior = PriorSpec.parse(self.prior)
        for name in ("vocab_size", "hidden_size", "num_layers", "latent_dim", "floor_embedding_dim",
                     "word_embedding_dim", "max_decode_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})


PRESETS = {
    "hred": {},
    "hred_l": {"num_layers": 2, "hidden_size": 1000},
    "hred_xl": {"num_layers": 2, "hidden_size": 2000},
}


def preset(name: str, vocab_size: int, **overrides) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, **{**PRESETS[name], **overrides})


@dataclass
class Batch:
    context: torch.Tensor  # (B, U, T) token ids
    context_floor: torch.Tensor  # (B, U), 1 where the speaker is the responder
    context_len: torch.Tensor  # (B,) utterances per context
    response: torch.Tensor | None = None  # (B, L) BOS ... EOS, padded

    def __len__(self) -> int:
        return self.context.shape[0]


@dataclass
class ContextEncoding:
    c: torch.Tensor  # (B, H)
    annotations: torch.Tensor  # (B, U*T, 2H)
    mask: torch.Tensor  # (B, U*T) True on real tokens


def responder_floor(context: Sequence[Utterance]) -> str:
    return "B" if context[-1].floor == "A" else "A"


def context_utterances(context_tokens: Sequence[Sequence[str]]) -> list[Utterance]:
    """Token lists with alternating floors ending on the non-responding speaker."""
    n = len(context_tokens)
    return [Utterance(tuple(toks), "A" if (n - 1 - i) % 2 == 0 else "B") for i, toks in enumerate(context_tokens)]


def collate(
    vocab: Vocabulary,
    contexts: Sequence[Sequence[Utterance]],
    responses: Sequence[Utterance] | None = None,
    max_len: int | None = None,
) -> Batch:
    if any(len(c) == 0 for c in contexts):
        raise ValueError("every context needs at least one utterance")
    U = max(len(c) for c in contexts)
    T = max(max(len(u.tokens) for u in c) for c in contexts)
    T = max(T, 1)
    B = len(contexts)
    ctx = torch.full((B, U, T), vocab.pad_id, dtype=torch.long)
    floors = torch.zeros((B, U), dtype=torch.long)
    for b, c in enumerate(contexts):
        resp_floor = responses[b].floor if responses is not None else responder_floor(c)
        for u, utt in enumerate(c):
            ids = vocab.encode(utt.tokens)
            if ids:
                ctx[b, u, : len(ids)] = torch.tensor(ids)
            floors[b, u] = int(utt.floor == resp_floor)
    lens = torch.tensor([len(c) for c in contexts], dtype=torch.long)
    resp = None
    if responses is not None:
        seqs = [
            [vocab.bos_id] + vocab.encode(r.tokens[:max_len] if max_len else r.tokens) + [vocab.eos_id]
            for r in responses
        ]
        L = max(len(s) for s in seqs)
        resp = torch.full((B, L), vocab.pad_id, dtype=torch.long)
        for b, s in enumerate(seqs):
            resp[b, : len(s)] = torch.tensor(s)
    return Batch(ctx, floors, lens, resp)


class HierarchicalDialogueModel(nn.Module):
    def __init__(self, config: ModelConfig, pad_id: int = 0, bos_id: int = 2, eos_id: int = 3):
        super().__init__()
        self.config = config
        self.pad_id, self.bos_id, self.eos_id = pad_id, bos_id, eos_id
        cfg = config
        H, E, D, V = cfg.hidden_size, cfg.word_embedding_dim, cfg.latent_dim, cfg.vocab_size
        self.prior_spec = cfg.prior
        self.variational = cfg.prior.variational
        zd = D if self.variational else 0

        self.embedding = nn.Embedding(V, E, padding_idx=pad_id)
        self.dropout = nn.Dropout(cfg.dropout)
        self.utt_encoder = nn.GRU(E, H, cfg.num_layers, batch_first=True, bidirectional=True)
        self.floor_embedding = nn.Embedding(2, cfg.floor_embedding_dim)
        self.dial_encoder = nn.GRU(2 * H + cfg.floor_embedding_dim, H, cfg.num_layers, batch_first=True)

        self.dec_init = nn.Linear(H + zd, cfg.num_layers * H)
        self.decoder = nn.GRU(E + zd, H, cfg.num_layers, batch_first=True)
        self.attn_key = nn.Linear(2 * H, H, bias=False)
        self.readout = nn.Linear(H + 2 * H, H)
        self.out = nn.Linear(H, V)

        if self.variational:
            K = cfg.prior.K
            # K independent tanh heads, stored stacked
            self.prior_w1 = nn.Parameter(torch.empty(K, H, H))
            self.prior_b1 = nn.Parameter(torch.empty(K, H))
            self.prior_w2 = nn.Parameter(torch.empty(K, H, 2 * D))
            self.prior_b2 = nn.Parameter(torch.empty(K, 2 * D))
            self.prior_wpi = nn.Parameter(torch.empty(K, H))
            self.prior_bpi = nn.Parameter(torch.empty(K))
            self.posterior = nn.Sequential(nn.Linear(3 * H, H), nn.Tanh(), nn.Linear(H, 2 * D))
            self.bow_head = nn.Sequential(nn.Linear(D + H, H), nn.Tanh(), nn.Linear(H, V))
        self.reset_parameters()

    def reset_parameters(self) -> None:
        r = self.config.init_range
        for name, p in self.named_parameters():
            if name in ("prior_wpi", "prior_bpi"):
                # symmetric start: every component equally likely
                nn.init.zeros_(p)
            elif "bias" in name or name.startswith("prior_b"):
                nn.init.zeros_(p)
            elif name.endswith("embedding.weight"):
                nn.init.uniform_(p, -1.0, 1.0)
            else:
                nn.init.uniform_(p, -r, r)
        with torch.no_grad():
            self.embedding.weight[self.pad_id].zero_()

    # -- encoding -------------------------------------------------------

    def _encode_utterances(self, tokens: torch.Tensor):
        """tokens (N, T) -> (token outputs (N, T, 2H), utterance vectors (N, 2H))."""
        N, T = tokens.shape
        lens = (tokens != self.pad_id).sum(-1).clamp_min(1)
        emb = self.dropout(self.embedding(tokens))
        packed = pack_padded_sequence(emb, lens.cpu(), batch_first=True, enforce_sorted=False)
        out, h = self.utt_encoder(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=T)
        h = h.view(self.config.num_layers, 2, N, -1)[-1]
        vec = torch.cat([h[0], h[1]], dim=-1)
        return out, vec

    def encode_context(self, batch: Batch) -> ContextEncoding:
        B, U, T = batch.context.shape
        if (batch.context_len < 1).any():
            raise ValueError("empty context")
        tok_out, utt_vec = self._encode_utterances(batch.context.view(B * U, T))
        utt_vec = utt_vec.view(B, U, -1)
        dial_in = torch.cat([utt_vec, self.floor_embedding(batch.context_floor)], dim=-1)
        dial_in = self.dropout(dial_in)
        packed = pack_padded_sequence(dial_in, batch.context_len.cpu(), batch_first=True, enforce_sorted=False)
        _, h = self.dial_encoder(packed)
        c = h[-1]
        annotations = tok_out.view(B, U * T, -1)
        mask = (batch.context != self.pad_id).view(B, U * T)
        empty = ~mask.any(-1)
        if empty.any():
            mask = mask.clone()
            mask[empty, 0] = True
        return ContextEncoding(c, annotations, mask)

    def encode_response(self, response: torch.Tensor) -> torch.Tensor:
        """Utterance-level encoding of BOS...EOS responses (BOS stripped)."""
        return self._encode_utterances(response[:, 1:])[1]

    # -- latent ---------------------------------------------------------

    def prior_params(self, c: torch.Tensor) -> tuple[GaussianParams, torch.Tensor]:
        """Per-component means, stddevs and normalized weights from the context."""
        D = self.config.latent_dim
        hidden = torch.tanh(torch.einsum("bh,khj->bkj", c, self.prior_w1) + self.prior_b1)
        out = torch.einsum("bkj,kjd->bkd", hidden, self.prior_w2) + self.prior_b2
        comps = GaussianParams(out[..., :D], positive_std(out[..., D:]))
        if self.prior_spec.mixture:
            logits = (hidden * self.prior_wpi).sum(-1) + self.prior_bpi
            weights = torch.softmax(logits, dim=-1)
        else:
            weights = torch.ones(c.shape[0], 1, dtype=c.dtype, device=c.device)
        return comps, weights

    def posterior_params(self, c: torch.Tensor, response_encoding: torch.Tensor) -> GaussianParams:
        out = self.posterior(torch.cat([c, response_encoding], dim=-1))
        D = self.config.latent_dim
        return GaussianParams(out[..., :D], positive_std(out[..., D:]))

    def prior_latent(
        self,
        c: torch.Tensor,
        generator: torch.Generator | None = None,
        variable: int | None = None,
        use_mean: bool = False,
    ) -> LatentState:
        """Latent drawn from the prior, optionally forcing weights one-hot at ``variable``.

        With ``use_mean`` the prior mean (weighted component mean) is used
        instead of a draw.
        """
        comps, weights = self.prior_params(c)
        if variable is not None:
            weights = one_hot_weights(weights, variable)
        if use_mean:
            return LatentState(mixture_mean(comps, weights), comps, weights)
        fam = self.prior_spec.family
        if fam == "gmm":
            return sample_gmm(comps, weights, generator, temperature=self.prior_spec.gmm_temperature)
        noise = torch.randn(comps.mean.shape, generator=generator, dtype=c.dtype, device=c.device)
        if fam == "lgm":
            return sample_lgm(comps, weights, noise)
        z = sample_gaussian(comps.component(0), noise[..., 0, :])
        return LatentState(z, comps, weights)

    # -- decoding -------------------------------------------------------

    def _init_hidden(self, c: torch.Tensor, z: torch.Tensor | None) -> torch.Tensor:
        x = torch.cat([c, z], dim=-1) if self.variational else c
        h = torch.tanh(self.dec_init(x))
        return h.view(c.shape[0], self.config.num_layers, -1).transpose(0, 1).contiguous()

    def _dec_input(self, tokens: torch.Tensor, z: torch.Tensor | None) -> torch.Tensor:
        emb = self.dropout(self.embedding(tokens))
        if self.variational:
            emb = torch.cat([emb, z.unsqueeze(1).expand(-1, tokens.shape[1], -1)], dim=-1)
        return emb

    def _readout(self, dec_out: torch.Tensor, enc: ContextEncoding) -> torch.Tensor:
        keys = self.attn_key(enc.annotations)
        scores = torch.bmm(dec_out, keys.transpose(1, 2))
        scores = scores.masked_fill(~enc.mask.unsqueeze(1), float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        ctx = torch.bmm(attn, enc.annotations)
        hidden = torch.tanh(self.readout(torch.cat([dec_out, ctx], dim=-1)))
        return self.out(self.dropout(hidden))

    def _check_z(self, z):
        if self.variational and z is None:
            raise ValueError("variational model needs a latent sample")
        return z if self.variational else None

    def decoder_logprobs(self, enc: ContextEncoding, z: torch.Tensor | None, response: torch.Tensor) -> torch.Tensor:
        """Teacher-forced log-probabilities ``(B, L-1, V)`` for ``response[:, 1:]``."""
        z = self._check_z(z)
        h0 = self._init_hidden(enc.c, z)
        dec_out, _ = self.decoder(self._dec_input(response[:, :-1], z), h0)
        return torch.log_softmax(self._readout(dec_out, enc), dim=-1)

    def decode_step(self, enc: ContextEncoding, z: torch.Tensor | None, prefix: torch.Tensor) -> torch.Tensor:
        """Next-token probabilities ``(B, V)`` after BOS followed by ``prefix`` ``(B, l)``."""
        bos = torch.full((prefix.shape[0], 1), self.bos_id, dtype=torch.long, device=prefix.device)
        seq = torch.cat([bos, prefix], dim=1)
        # decoder_logprobs drops the last input position; append a dummy target
        logp = self.decoder_logprobs(enc, z, torch.cat([seq, bos], dim=1))
        return logp[:, -1].exp()

    def latent_for_scoring(self, c: torch.Tensor, variable: int | None = None) -> torch.Tensor | None:
        """Deterministic plug-in latent: the prior mean (None for HRED)."""
        if not self.variational:
            return None
        return self.prior_latent(c, variable=variable, use_mean=True).z

    def sequence_logprob(self, batch: Batch, z: torch.Tensor | None = None, variable: int | None = None) -> torch.Tensor:
        """Per-example log-probability of the responses in ``batch`` (EOS included).

        Variational models use ``z`` when given, else the prior-mean plug-in.
        HRED ignores ``z``.
        """
        enc = self.encode_context(batch)
        if self.variational and z is None:
            z = self.latent_for_scoring(enc.c, variable)
        logp = self.decoder_logprobs(enc, z if self.variational else None, batch.response)
        targets = batch.response[:, 1:]
        tok = logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
        return tok.masked_fill(targets == self.pad_id, 0.0).sum(-1)

    @torch.no_grad()
    def decode_free(
        self,
        enc: ContextEncoding,
        z: torch.Tensor | None,
        mode: str = "greedy",
        generator: torch.Generator | None = None,
        max_len: int | None = None,
    ) -> list[list[int]]:
        if mode not in ("greedy", "sample"):
            raise ValueError(f"unknown decoding mode {mode!r}")
        z = self._check_z(z)
        max_len = max_len or self.config.max_decode_len
        B = enc.c.shape[0]
        h = self._init_hidden(enc.c, z)
        tok = torch.full((B, 1), self.bos_id, dtype=torch.long, device=enc.c.device)
        done = torch.zeros(B, dtype=torch.bool)
        out: list[torch.Tensor] = []
        for _ in range(max_len):
            dec_out, h = self.decoder(self._dec_input(tok, z), h)
            logits = self._readout(dec_out, enc)[:, 0]
            if mode == "greedy":
                nxt = logits.argmax(-1)
            else:
                nxt = torch.multinomial(torch.softmax(logits.double(), -1), 1, generator=generator).squeeze(1)
            nxt = nxt.masked_fill(done, self.pad_id)
            out.append(nxt)
            done = done | (nxt == self.eos_id)
            if bool(done.all()):
                break
            tok = nxt.unsqueeze(1)
        ids = torch.stack(out, dim=1).tolist()
        result = []
        for row in ids:
            seq = []
            for i in row:
                if i in (self.eos_id, self.pad_id):
                    break
                seq.append(i)
            result.append(seq)
        return result

    @torch.no_grad()
    def next_token_probs(self, context: Sequence[Utterance], prefix_ids: Sequence[int], vocab: Vocabulary) -> np.ndarray:
        batch = collate(vocab, [context])
        enc = self.encode_context(batch)
        z = self.latent_for_scoring(enc.c)
        prefix = torch.tensor([list(prefix_ids)], dtype=torch.long)
        return self.decode_step(enc, z, prefix)[0].double().numpy()


def sequence_logprob(model: HierarchicalDialogueModel, batch: Batch, z: torch.Tensor | None = None) -> torch.Tensor:
    return model.sequence_logprob(batch, z)


def _generator(seed: int | None) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(0 if seed is None else int(seed))
    return g


@torch.no_grad()
def generate_batch(
    model: HierarchicalDialogueModel,
    contexts: Sequence[Sequence[Utterance]],
    vocab: Vocabulary,
    mode: str = "greedy",
    seed: int | None = 0,
    variable: int | None = None,
    batch_size: int = 64,
) -> list[Utterance]:
    """Decode one response per context; variational models draw z from the prior.

    With ``variable`` set, the prior weights are forced one-hot at that
    variable before drawing z.
    """
    if variable is not None:
        if not model.prior_spec.mixture and variable != 0:
            raise ValueError("single-variable decoding needs a GMM or LGM prior")
        if variable >= model.prior_spec.K:
            raise ValueError(f"variable {variable} out of range for K={model.prior_spec.K}")
    was_training = model.training
    model.eval()
    gen = _generator(seed)
    out: list[Utterance] = []
    try:
        for start in range(0, len(contexts), batch_size):
            chunk = contexts[start : start + batch_size]
            enc = model.encode_context(collate(vocab, chunk))
            z = None
            if model.variational:
                var = variable if model.prior_spec.mixture else None
                z = model.prior_latent(enc.c, gen, variable=var).z
            ids = model.decode_free(enc, z, mode, gen)
            out.extend(Utterance(tuple(vocab.decode(seq)), responder_floor(ctx)) for seq, ctx in zip(ids, chunk))
    finally:
        model.train(was_training)
    return out


def generate(model, context: Sequence[Utterance], vocab: Vocabulary, mode: str = "greedy", seed: int | None = 0) -> Utterance:
    return generate_batch(model, [context], vocab, mode, seed)[0]


def generate_with_variable(model, context: Sequence[Utterance], vocab: Vocabulary, k: int, seed: int | None = 0,
                           mode: str = "greedy") -> Utterance:
    """Decode with the prior weights forced one-hot at variable ``k``."""
    return generate_batch(model, [context], vocab, mode, seed, variable=k)[0]


def build_model(config: ModelConfig, vocab: Vocabulary | None = None, dtype=torch.float32) -> HierarchicalDialogueModel:
    kw = {}
    if vocab is not None:
        kw = {"pad_id": vocab.pad_id, "bos_id": vocab.bos_id, "eos_id": vocab.eos_id}
    return HierarchicalDialogueModel(config, **kw).to(dtype)
