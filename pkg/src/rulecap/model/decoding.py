"""Greedy and beam-search decoding."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch

from ..text import Vocab
from .transformer import Batch, RuleCapModel

EOS_STOP = "EOS"
MAX_LEN_STOP = "max-length"


@dataclass
class GenerationOutput:
    tokens: list[int]
    step_logprobs: list[float]
    stop_reason: str
    distributions: list[torch.Tensor] | None = field(default=None, repr=False)

    @property
    def score(self) -> float:
        """Length-normalized log-probability, counting EOS as a step."""
        return sum(self.step_logprobs) / max(1, len(self.step_logprobs))


def _step_logprobs(model: RuleCapModel, memory, mem_pad, prefix: torch.Tensor) -> torch.Tensor:
    logits = model.decode(memory, mem_pad, prefix)[:, -1]
    # <pad> and <bos> are never generated
    logits[:, Vocab.pad_id] = float("-inf")
    logits[:, Vocab.bos_id] = float("-inf")
    return torch.log_softmax(logits, dim=-1)


@torch.no_grad()
def decode_greedy(model: RuleCapModel, batch: Batch, max_len: int | None = None, keep_distributions: bool = False,
                  memory=None) -> list[GenerationOutput]:
    """Argmax decoding from BOS until EOS or ``max_len`` tokens, batched."""
    was_training = model.training
    model.eval()
    max_len = min(max_len or model.cfg.max_tgt_len, model.cfg.max_tgt_len)
    if memory is None:
        memory, mem_pad = model.encode(batch)
    else:
        memory, mem_pad = memory
    B = memory.shape[0]
    ys = torch.full((B, 1), Vocab.bos_id, dtype=torch.long)
    outs = [GenerationOutput([], [], MAX_LEN_STOP, [] if keep_distributions else None) for _ in range(B)]
    alive = list(range(B))
    for _ in range(max_len):
        logp = _step_logprobs(model, memory[alive], mem_pad[alive], ys[alive])
        nxt = logp.argmax(dim=-1)
        step = torch.full((B,), Vocab.pad_id, dtype=torch.long)
        still = []
        for row, b in enumerate(alive):
            tok = int(nxt[row])
            out = outs[b]
            out.step_logprobs.append(float(logp[row, tok]))
            if keep_distributions:
                out.distributions.append(logp[row].exp())
            step[b] = tok
            if tok == Vocab.eos_id:
                out.stop_reason = EOS_STOP
            else:
                out.tokens.append(tok)
                still.append(b)
        ys = torch.cat([ys, step.unsqueeze(1)], dim=1)
        alive = still
        if not alive:
            break
    model.train(was_training)
    return outs


@torch.no_grad()
def decode_beam(model: RuleCapModel, batch: Batch, beam_size: int = 3, max_len: int | None = None) -> list[GenerationOutput]:
    """Beam search per sample, ranked by length-normalized log-probability.

    Finished hypotheses compete with beams still alive at ``max_len``.
    ``beam_size=1`` reproduces greedy decoding.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    was_training = model.training
    model.eval()
    max_len = min(max_len or model.cfg.max_tgt_len, model.cfg.max_tgt_len)
    memory, mem_pad = model.encode(batch)
    results = []
    for b in range(memory.shape[0]):
        mem, mp = memory[b : b + 1], mem_pad[b : b + 1]
        beams: list[tuple[list[int], list[float]]] = [([], [])]
        finished: list[GenerationOutput] = []
        for _ in range(max_len):
            prefixes = torch.tensor([[Vocab.bos_id] + toks for toks, _ in beams], dtype=torch.long)
            logp = _step_logprobs(model, mem.expand(len(beams), -1, -1), mp.expand(len(beams), -1), prefixes)
            cand = []
            for i, (_, lps) in enumerate(beams):
                top = torch.topk(logp[i], min(beam_size, logp.shape[-1]))
                for lp, tok in zip(top.values.tolist(), top.indices.tolist()):
                    cand.append((sum(lps) + lp, i, tok, lp))
            cand.sort(key=lambda c: -c[0])
            new_beams = []
            for _, i, tok, lp in cand:
                if lp == float("-inf"):
                    continue
                toks, lps = beams[i]
                if tok == Vocab.eos_id:
                    finished.append(GenerationOutput(list(toks), lps + [lp], EOS_STOP))
                elif len(new_beams) < beam_size:
                    new_beams.append((toks + [tok], lps + [lp]))
            beams = new_beams
            if len(finished) >= beam_size or not beams:
                break
        else:
            finished.extend(GenerationOutput(toks, lps, MAX_LEN_STOP) for toks, lps in beams)
        best = max(finished, key=lambda o: o.score)
        results.append(best)
    model.train(was_training)
    return results
