"""Train the bundled toy transformer on the bundled corpus and export it.

The architecture mirrors the Rust forward pass exactly: byte vocabulary,
pre-RMSNorm blocks, per-head attention with interleaved-pair rotary
embedding, gated SiLU feed-forward, no biases, untied embedding and output
projection. Weight layout follows the checkpoint naming scheme, with every
projection stored as (input dim x output dim) so that a layer computes X @ W.

Usage:
    python tools/train_toy.py --out crates/core/data/toy_model.olica \
        --fixture crates/core/tests/data/reference_logits.json
"""
import argparse
import json
import math
import pathlib
import struct

import numpy as np
import torch

CONFIG = {
    "n_blocks": 4,
    "d": 64,
    "h": 4,
    "ffn_width": 256,
    "vocab_size": 256,
    "activation": "silu",
    "gated": True,
    "rope": True,
    "max_seq_len": 256,
    "rope_base": 10000.0,
    "norm_eps": 1e-5,
}


def rms_norm(x, g, eps):
    return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + eps) * g


def rope(x, base):
    # x: (batch, n, d_h); rotates pairs (2j, 2j+1) by pos * base^(-2j/d_h)
    n, dh = x.shape[-2], x.shape[-1]
    j = torch.arange(0, dh, 2, dtype=x.dtype)
    theta = base ** (-j / dh)
    pos = torch.arange(n, dtype=x.dtype)[:, None]
    ang = pos * theta[None, :]
    cos, sin = torch.cos(ang), torch.sin(ang)
    x0, x1 = x[..., 0::2], x[..., 1::2]
    out = torch.empty_like(x)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out


class Toy(torch.nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        d, m, v = cfg["d"], cfg["ffn_width"], cfg["vocab_size"]
        p = torch.nn.Parameter
        std = 0.02
        self.embed = p(torch.randn(v, d) * std)
        self.blocks = torch.nn.ModuleList()
        for _ in range(cfg["n_blocks"]):
            b = torch.nn.Module()
            b.attn_norm = p(torch.ones(d))
            b.wq = p(torch.randn(d, d) * std)
            b.wk = p(torch.randn(d, d) * std)
            b.wv = p(torch.randn(d, d) * std)
            b.wo = p(torch.randn(d, d) * std)
            b.ffn_norm = p(torch.ones(d))
            b.wu = p(torch.randn(d, m) * std)
            b.wg = p(torch.randn(d, m) * std)
            b.wd = p(torch.randn(d, m) * std)
            self.blocks.append(b)
        self.final_norm = p(torch.ones(d))
        self.proj = p(torch.randn(d, v) * std)

    def forward(self, tokens):
        cfg = self.cfg
        h, dh = cfg["h"], cfg["d"] // cfg["h"]
        eps, base = cfg["norm_eps"], cfg["rope_base"]
        x = self.embed[tokens]
        n = tokens.shape[-1]
        mask = torch.triu(torch.ones(n, n, dtype=torch.bool), 1)
        for b in self.blocks:
            a = rms_norm(x, b.attn_norm, eps)
            out = torch.zeros_like(x)
            for i in range(h):
                sl = slice(i * dh, (i + 1) * dh)
                q = rope(a @ b.wq[:, sl], base)
                k = rope(a @ b.wk[:, sl], base)
                s = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
                s = s.masked_fill(mask, float("-inf"))
                att = torch.softmax(s, dim=-1)
                out = out + (att @ (a @ b.wv[:, sl])) @ b.wo[:, sl].T
            x = x + out
            f = rms_norm(x, b.ffn_norm, eps)
            x = x + ((f @ b.wu) * torch.nn.functional.silu(f @ b.wg)) @ b.wd.T
        x = rms_norm(x, self.final_norm, eps)
        return x @ self.proj


def named_tensors(model):
    out = {"embed.tok": model.embed, "final.norm": model.final_norm, "final.proj": model.proj}
    for l, b in enumerate(model.blocks):
        out[f"blocks.{l}.attn.norm"] = b.attn_norm
        out[f"blocks.{l}.ffn.norm"] = b.ffn_norm
        for name in ("wq", "wk", "wv", "wo"):
            out[f"blocks.{l}.attn.{name}"] = getattr(b, name)
        for name in ("wu", "wd", "wg"):
            out[f"blocks.{l}.ffn.{name}"] = getattr(b, name)
    return {k: v.detach().to(torch.float32).numpy() for k, v in out.items()}


def write_checkpoint(path, tensors):
    entries = {}
    payload = bytearray()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        start = len(payload)
        payload += arr.tobytes()
        entries[name] = {"dtype": "F32", "shape": list(arr.shape), "offsets": [start, len(payload)]}
    manifest = {"format": "olica", "version": 1, "config": CONFIG, "tensors": entries, "pruning": None}
    header = json.dumps(manifest, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(payload)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--data", default="crates/core/data")
    ap.add_argument("--out", default="crates/core/data/toy_model.olica")
    ap.add_argument("--fixture", default="crates/core/tests/data/reference_logits.json")
    ap.add_argument("--steps", type=int, default=3000)
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--seq", type=int, default=128)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    torch.manual_seed(args.seed)
    torch.set_num_threads(1)
    data = pathlib.Path(args.data)
    train = torch.tensor(list((data / "corpus_train.txt").read_bytes()), dtype=torch.long)
    held = torch.tensor(list((data / "corpus_heldout.txt").read_bytes()), dtype=torch.long)

    model = Toy(CONFIG)
    opt = torch.optim.AdamW(model.parameters(), lr=3e-3, weight_decay=0.01, betas=(0.9, 0.95))
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=3e-3, total_steps=args.steps, pct_start=0.05)
    for step in range(args.steps):
        idx = torch.randint(0, len(train) - args.seq - 1, (args.batch,))
        x = torch.stack([train[i : i + args.seq] for i in idx])
        y = torch.stack([train[i + 1 : i + args.seq + 1] for i in idx])
        logits = model(x)
        loss = torch.nn.functional.cross_entropy(logits.reshape(-1, 256), y.reshape(-1))
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
        sched.step()
        if step % 250 == 0 or step == args.steps - 1:
            print(f"step {step} loss {loss.item():.4f}", flush=True)

    tensors = named_tensors(model)
    write_checkpoint(args.out, tensors)

    # Double-precision reference on the exact f32-rounded weights.
    with torch.no_grad():
        for b in model.parameters():
            b.data = b.data.to(torch.float32)
        model = model.double()
        n_win = (len(held) - 1) // args.seq
        nll, count = 0.0, 0
        for w in range(n_win):
            x = held[w * args.seq : (w + 1) * args.seq][None]
            y = held[w * args.seq + 1 : (w + 1) * args.seq + 1]
            lp = torch.log_softmax(model(x)[0], -1)
            nll -= lp[torch.arange(args.seq), y].sum().item()
            count += args.seq
        ppl = math.exp(nll / count)
        probe = held[:16]
        ref = model(probe[None])[0]
    print(f"held-out ppl {ppl:.4f}")
    fixture = {
        "tokens": probe.tolist(),
        "logits": ref.tolist(),
        "heldout_ppl_seq128": ppl,
    }
    pathlib.Path(args.fixture).parent.mkdir(parents=True, exist_ok=True)
    pathlib.Path(args.fixture).write_text(json.dumps(fixture))


if __name__ == "__main__":
    main()
