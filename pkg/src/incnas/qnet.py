"""Transformer-encoder dueling Q-network over (current + neighbors) token sequences."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

CHECKPOINT_MAGIC = b"INCNASQ1"


@dataclass(frozen=True)
class QNetConfig:
    token_width: int
    num_slots: int  # 1 + neighbor cap
    latent: int = 256
    heads: int = 4
    blocks: int = 2
    ff_mult: int = 4
    encoder_layers: int = 2
    positional: bool = True


def sinusoidal_table(length: int, width: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(torch.arange(0, width, 2, dtype=torch.float64) * (-math.log(10000.0) / width))
    table = torch.zeros(length, width, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * div)
    table[:, 1::2] = torch.cos(pos * div)[:, : width // 2]
    return table


class QNetwork(nn.Module):
    """Dueling Q-network.

    Tokens pass through an MLP encoder, get a fixed sinusoidal position code and
    go through a stack of self-attention blocks. Each slot's output gives an
    advantage, slot 0 (the current architecture) gives the state value, and
    ``Q_i = V + A_i - mean(A over valid slots)``. Masked slots come out as -inf.
    """

    def __init__(self, cfg: QNetConfig):
        super().__init__()
        self.cfg = cfg
        layers: list[nn.Module] = []
        width = cfg.token_width
        for _ in range(cfg.encoder_layers):
            layers += [nn.Linear(width, cfg.latent), nn.ReLU()]
            width = cfg.latent
        self.encoder = nn.Sequential(*layers)
        self.register_buffer("position", sinusoidal_table(cfg.num_slots, cfg.latent).float())
        self.blocks = nn.ModuleList(
            nn.TransformerEncoderLayer(
                d_model=cfg.latent,
                nhead=cfg.heads,
                dim_feedforward=cfg.ff_mult * cfg.latent,
                dropout=0.0,
                batch_first=True,
            )
            for _ in range(cfg.blocks)
        )
        self.advantage = nn.Sequential(nn.Linear(cfg.latent, cfg.latent), nn.ReLU(), nn.Linear(cfg.latent, 1))
        self.value = nn.Sequential(nn.Linear(cfg.latent, cfg.latent), nn.ReLU(), nn.Linear(cfg.latent, 1))

    def forward(self, tokens: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if tokens.shape[-1] != self.cfg.token_width or tokens.shape[-2] != self.cfg.num_slots:
            raise ValueError(
                f"expected (*, {self.cfg.num_slots}, {self.cfg.token_width}) tokens, got {tuple(tokens.shape)}"
            )
        mask = mask.bool()
        h = self.encoder(tokens)
        if self.cfg.positional:
            h = h + self.position.to(h.dtype)
        pad = ~mask
        for block in self.blocks:
            h = block(h, src_key_padding_mask=pad)
        adv = self.advantage(h).squeeze(-1)
        value = self.value(h[:, 0]).squeeze(-1)
        m = mask.to(adv.dtype)
        mean_adv = (adv * m).sum(-1) / m.sum(-1)
        q = value.unsqueeze(-1) + adv - mean_adv.unsqueeze(-1)
        return q.masked_fill(pad, float("-inf"))


def as_tensors(tokens: np.ndarray, mask: np.ndarray, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    t = torch.as_tensor(tokens, dtype=dtype)
    m = torch.as_tensor(mask, dtype=torch.bool)
    if t.dim() == 2:
        t, m = t.unsqueeze(0), m.unsqueeze(0)
    return t, m


def qnetwork_forward(obs, net: QNetwork) -> np.ndarray:
    """Q-values for one observation as a float64 array (-inf on masked slots)."""
    t, m = as_tensors(obs.tokens, obs.action_mask, dtype=next(net.parameters()).dtype)
    with torch.no_grad():
        return net(t, m)[0].double().numpy()


def greedy_action(q: np.ndarray) -> int:
    return int(np.argmax(q))


def snapshot(net: QNetwork) -> QNetwork:
    """Independent copy for readers; later updates to ``net`` do not reach it."""
    copy = QNetwork(net.cfg).to(next(net.parameters()).dtype)
    copy.load_state_dict({k: v.detach().clone() for k, v in net.state_dict().items()})
    copy.eval()
    return copy


def save_checkpoint(net: QNetwork, path: str | Path, extra: dict | None = None) -> None:
    """Write named float32 little-endian tensors plus a JSON sidecar of hyperparameters.

    Layout: magic, u32 tensor count, then per tensor u32 name length, UTF-8
    name, u32 rank, u32 dims, raw data.
    """
    path = Path(path)
    state = net.state_dict()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(state)))
        for name, tensor in state.items():
            data = tensor.detach().cpu().numpy().astype("<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())
    sidecar = {"qnet": asdict(net.cfg)}
    if extra:
        sidecar.update(extra)
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def read_tensors(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a Q-network checkpoint")
    off = 8
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape).copy()
        off += 4 * size
    return out


def load_checkpoint(path: str | Path) -> tuple[QNetwork, dict]:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    net = QNetwork(QNetConfig(**sidecar["qnet"]))
    tensors = read_tensors(path)
    net.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    net.eval()
    return net, sidecar
