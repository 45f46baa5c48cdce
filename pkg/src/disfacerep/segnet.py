"""Stage 2: a small convolutional encoder-decoder trained with pixel-wise
cross-entropy on pseudo masks.

The architecture is a placeholder for whatever real segmentation network a
deployment would use; the training loop, determinism, and prediction
contracts are the part under test.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .config import PipelineConfig
from .models import face_to_tensor, reseed_parameters
from .rng import substream
from .schema import ComponentSchema, LabeledFace, SegMask


class SegNet(nn.Module):
    """3-level encoder-decoder emitting K+1 class logits per pixel."""

    def __init__(self, num_components: int, channels: int = 16, seed: int = 0) -> None:
        super().__init__()
        c = channels
        self.num_components = num_components
        self.enc1 = nn.Conv2d(3, c, 3, padding=1)
        self.enc2 = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.mid = nn.Conv2d(2 * c, 2 * c, 3, padding=1)
        self.dec1 = nn.Conv2d(2 * c, c, 3, padding=1)
        self.head = nn.Conv2d(2 * c, num_components + 1, 1)
        reseed_parameters(self, seed, scale=0.1)

    def forward(self, x: Tensor) -> Tensor:
        e1 = F.relu(self.enc1(x))
        e2 = F.relu(self.enc2(e1))
        m = F.relu(self.mid(e2))
        up = F.interpolate(m, size=e1.shape[-2:], mode="nearest")
        d1 = F.relu(self.dec1(up))
        return self.head(torch.cat([e1, d1], dim=1))


def train_parser(
    pairs: list[tuple[LabeledFace, SegMask]],
    schema: ComponentSchema,
    config: PipelineConfig,
    log: list[float] | None = None,
) -> SegNet:
    """Fit the parser on (image, pseudo mask) pairs; deterministic per seed."""
    if not pairs:
        raise ValueError("no training pairs: pseudo-label manifest is empty")
    dtype = config.torch_dtype
    model = SegNet(schema.K, channels=config.seg_channels, seed=config.seed * 3 + 17).to(dtype)
    model.train()
    images = torch.stack([face_to_tensor(f, dtype) for f, _ in pairs])
    targets = torch.from_numpy(np.stack([m.labels for _, m in pairs]))
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.seg_lr)
    n = images.shape[0]
    for step in range(config.seg_steps):
        rng = substream(config.seed, f"seg-batch:{step}")
        take = min(config.seg_batch_size, n)
        idx = torch.from_numpy(np.ascontiguousarray(rng.choice(n, size=take, replace=False)))
        optimizer.zero_grad()
        logits = model(images[idx])
        loss = F.cross_entropy(logits, targets[idx])
        loss.backward()
        optimizer.step()
        if log is not None:
            log.append(float(loss.detach()))
    model.eval()
    return model


def predict(model: SegNet, faces: list[LabeledFace]) -> list[SegMask]:
    dtype = next(model.parameters()).dtype
    out = []
    with torch.no_grad():
        for face in faces:
            logits = model(face_to_tensor(face, dtype).unsqueeze(0))[0]
            labels = logits.argmax(dim=0).cpu().numpy().astype(np.int64)
            out.append(SegMask(labels, model.num_components))
    return out
