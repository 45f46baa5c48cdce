"""Open-set detection clients used to locate face components.

The wire contract is deliberately narrow so the real detector stays
swappable: a request is (PNG image bytes, list of component phrases) and a
response is a list of (phrase, box, confidence) with boxes in pixel units
as [h1, w1, h2, w2], half-open.  Two implementations ship — a local stub
that reads ground-truth bounding boxes with optional corner noise, and an
HTTP adapter for an external detection service.
"""

from __future__ import annotations

import base64
import hashlib
import io
import logging
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
from PIL import Image

from .errors import DetectorTransportError
from .rng import substream
from .schema import ComponentSchema, LabeledFace, SegMask

logger = logging.getLogger("disfacerep")

Box = tuple[int, int, int, int]
WireDetection = tuple[str, Box, float]


@dataclass(frozen=True)
class Detection:
    """One candidate box for one component, pixel units, half-open."""

    component: str
    box: Box  # (h1, w1, h2, w2)
    confidence: float

    def __post_init__(self) -> None:
        h1, w1, h2, w2 = self.box
        if h1 > h2 or w1 > w2:
            raise ValueError(f"degenerate box {self.box}")
        if min(h1, w1) < 0:
            raise ValueError(f"negative box corner {self.box}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    @property
    def center_w(self) -> float:
        return (self.box[1] + self.box[3]) / 2.0


class DetectionClient(Protocol):
    def detect(self, image: bytes, phrases: Sequence[str]) -> list[WireDetection]:
        """Return candidate boxes for each phrase; may return zero or many per phrase."""
        ...


def image_to_png_bytes(pixels: np.ndarray) -> bytes:
    """Canonical byte encoding shared by every client (8-bit PNG)."""
    arr = np.clip(np.asarray(pixels, dtype=np.float64) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


class StubDetectionClient:
    """Serves ground-truth boxes for registered images.

    Images are keyed by a digest of their canonical PNG bytes, which keeps
    the wire contract honest: the client sees only bytes and phrases.  Box
    corners can be jittered by ``noise`` (a fraction of the box size) and
    confidences are drawn uniformly from ``confidence_range``, both from a
    per-image random substream so results do not depend on call order.
    """

    def __init__(
        self,
        schema: ComponentSchema,
        noise: float = 0.0,
        seed: int = 0,
        miss_rate: float = 0.0,
        confidence_range: tuple[float, float] = (0.8, 1.0),
    ) -> None:
        self.schema = schema
        self.noise = noise
        self.seed = seed
        self.miss_rate = miss_rate
        self.confidence_range = confidence_range
        self._masks: dict[str, SegMask] = {}
        self._phrase_to_name = {schema.phrase(n): n for n in schema.names}

    def register(self, face: LabeledFace, mask: SegMask) -> None:
        digest = hashlib.sha256(image_to_png_bytes(face.pixels)).hexdigest()
        self._masks[digest] = mask

    def detect(self, image: bytes, phrases: Sequence[str]) -> list[WireDetection]:
        digest = hashlib.sha256(image).hexdigest()
        mask = self._masks.get(digest)
        if mask is None:
            raise DetectorTransportError("stub has no registered mask for this image")
        rng = substream(self.seed, f"det:{digest}")
        out: list[WireDetection] = []
        H, W = mask.labels.shape
        for phrase in phrases:
            # consume the same number of draws whether or not a box is emitted
            # so one phrase's outcome cannot perturb another's
            u_miss = rng.random()
            jitter = rng.uniform(-1.0, 1.0, size=4)
            u_conf = rng.random()
            name = self._phrase_to_name.get(phrase, phrase)
            if name not in self.schema.names:
                continue
            box = mask.bounding_box(self.schema.index_of(name))
            if box is None or u_miss < self.miss_rate:
                continue
            h1, w1, h2, w2 = box
            if self.noise > 0.0:
                dh = max((h2 - h1) * self.noise, 1.0)
                dw = max((w2 - w1) * self.noise, 1.0)
                h1 = int(np.clip(round(h1 + jitter[0] * dh), 0, H - 1))
                h2 = int(np.clip(round(h2 + jitter[1] * dh), h1 + 1, H))
                w1 = int(np.clip(round(w1 + jitter[2] * dw), 0, W - 1))
                w2 = int(np.clip(round(w2 + jitter[3] * dw), w1 + 1, W))
            lo, hi = self.confidence_range
            conf = float(lo + (hi - lo) * u_conf)
            out.append((phrase, (int(h1), int(w1), int(h2), int(w2)), conf))
        return out


class HttpDetectionClient:
    """POSTs to an external detection endpoint.

    Request JSON: ``{"image": <base64 PNG>, "phrases": [...]}``.
    Response JSON: ``{"detections": [{"phrase": ..., "box": [h1, w1, h2, w2],
    "confidence": ...}, ...]}``.  Transport failures and 5xx responses are
    retried ``retries`` times before raising.
    """

    def __init__(
        self,
        endpoint: str,
        retries: int = 2,
        timeout: float = 30.0,
        auth_token: str | None = None,
    ) -> None:
        if not endpoint:
            raise ValueError("endpoint must be a non-empty URL")
        self.endpoint = endpoint
        self.retries = retries
        self.timeout = timeout
        self.auth_token = auth_token

    def detect(self, image: bytes, phrases: Sequence[str]) -> list[WireDetection]:
        import requests

        payload = {"image": base64.b64encode(image).decode("ascii"), "phrases": list(phrases)}
        headers = {"Content-Type": "application/json"}
        if self.auth_token:
            headers["Authorization"] = f"Bearer {self.auth_token}"
        last_error: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                resp = requests.post(
                    self.endpoint, json=payload, headers=headers, timeout=self.timeout
                )
                if resp.status_code >= 500:
                    last_error = DetectorTransportError(
                        f"detector returned {resp.status_code}"
                    )
                    continue
                resp.raise_for_status()
                body = resp.json()
                break
            except requests.RequestException as exc:
                last_error = exc
                logger.warning("detector request failed (attempt %d): %s", attempt + 1, exc)
        else:
            raise DetectorTransportError(
                f"detector unreachable after {self.retries + 1} attempts: {last_error}"
            )
        out: list[WireDetection] = []
        for item in body.get("detections", []):
            box = item.get("box", [])
            if len(box) != 4:
                logger.warning("dropping malformed detection %r", item)
                continue
            out.append(
                (
                    str(item.get("phrase", "")),
                    (int(box[0]), int(box[1]), int(box[2]), int(box[3])),
                    float(item.get("confidence", 0.0)),
                )
            )
        return out
