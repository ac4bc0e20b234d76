"""Text-to-image backends: capability limits, prompt templates, generation.

Backends differ in how many reference images they accept (in-context models
take a few, adapter-based models usually one), so capability limits are
enforced here, before any request leaves the process.  Reference images are
bound into the prompt with the template

    According to these examples of <c_1>:<img1>, ..., generate <p>

where each ``<imgK>`` placeholder refers to the K-th attached image.  Profiles
(name, endpoint, limits, default parameters) are data files, not code; two
ship built in: ``omnigen`` (3 reference images, in-context) and ``sdxl-ip``
(single reference through an image-prompt adapter, strength 0.5).
"""

from __future__ import annotations

import base64
import hashlib
import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import requests

from .errors import CapabilityError, ConfigError, TransportError

PLACEHOLDER_INDEXED = "indexed"  # <img1>
PLACEHOLDER_OMNIGEN = "omnigen"  # <img><|image_1|></img>

_PLACEHOLDER_RENDERERS = {
    PLACEHOLDER_INDEXED: lambda k: f"<img{k}>",
    PLACEHOLDER_OMNIGEN: lambda k: f"<img><|image_{k}|></img>",
}

_PLACEHOLDER_PATTERNS = {
    PLACEHOLDER_INDEXED: re.compile(r"<img(\d+)>"),
    PLACEHOLDER_OMNIGEN: re.compile(r"<img><\|image_(\d+)\|></img>"),
}


@dataclass(frozen=True)
class GenerationParams:
    guidance_scale: float | None = None
    image_guidance_scale: float | None = None
    width: int | None = None
    height: int | None = None
    adapter_scale: float | None = None
    seed: int | None = None

    def merged_over(self, defaults: "GenerationParams") -> "GenerationParams":
        """Fill unset fields from `defaults`; explicit values win."""
        merged = {
            name: getattr(self, name) if getattr(self, name) is not None else getattr(defaults, name)
            for name in self.__dataclass_fields__
        }
        out = GenerationParams(**merged)
        if not out.width or not out.height or out.width <= 0 or out.height <= 0:
            raise ConfigError("generation params need positive width and height after merging defaults")
        if out.adapter_scale is not None and not 0.0 <= out.adapter_scale <= 1.0:
            raise ConfigError("adapter_scale must be in [0, 1]")
        return out

    def to_wire(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


@dataclass(frozen=True)
class BackendCapabilities:
    max_reference_images: int
    supports_personal_subject: bool
    default_params: GenerationParams

    def __post_init__(self):
        if self.max_reference_images < 0:
            raise ConfigError("max_reference_images must be >= 0")
        if self.supports_personal_subject and self.max_reference_images < 2:
            raise ConfigError("personalization needs room for a subject plus at least one reference")


@dataclass(frozen=True)
class BackendProfile:
    name: str
    capabilities: BackendCapabilities
    endpoint: str | None = None
    placeholder_style: str = PLACEHOLDER_INDEXED


@dataclass
class AugmentedPrompt:
    """Rendered reference prompt: text with image placeholders plus the
    attachments they refer to, in placeholder order."""

    text: str
    images: list[str]
    groups: list[tuple[str, list[str]]]
    subject_image: str | None = None


@dataclass
class GenerationResult:
    image: str  # path of the stored artifact
    backend_request: dict  # exact request body, persisted for traceability
    params_used: GenerationParams


def load_profile(name_or_path: str) -> BackendProfile:
    """Load a backend profile from a file path or the built-in set."""
    path = Path(name_or_path)
    if path.suffix == ".json" and path.exists():
        raw = json.loads(path.read_text(encoding="utf-8"))
    else:
        try:
            raw = json.loads(
                resources.files("imagerag").joinpath(f"profiles/{name_or_path}.json").read_text("utf-8")
            )
        except FileNotFoundError:
            raise ConfigError(f"unknown backend profile {name_or_path!r}") from None
    try:
        return BackendProfile(
            name=raw["name"],
            endpoint=raw.get("endpoint"),
            placeholder_style=raw.get("placeholder_style", PLACEHOLDER_INDEXED),
            capabilities=BackendCapabilities(
                max_reference_images=raw["max_reference_images"],
                supports_personal_subject=raw["supports_personal_subject"],
                default_params=GenerationParams(**raw.get("default_params", {})),
            ),
        )
    except KeyError as exc:
        raise ConfigError(f"backend profile {name_or_path!r} is missing field {exc}") from exc


def _render_groups(groups, style: str, start_index: int) -> tuple[str, list[str]]:
    render = _PLACEHOLDER_RENDERERS[style]
    clauses = []
    images: list[str] = []
    k = start_index
    for caption, refs in groups:
        if not caption:
            raise ValueError("every reference group needs a caption")
        if not refs:
            raise ValueError(f"reference group {caption!r} has no images")
        placeholders = []
        for ref in refs:
            placeholders.append(render(k))
            images.append(ref)
            k += 1
        clauses.append(f"{caption}:{', '.join(placeholders)}")
    return ", ".join(clauses), images


def render_template(
    prompt: str,
    groups: list[tuple[str, list[str]]],
    placeholder_style: str = PLACEHOLDER_INDEXED,
    max_images: int | None = None,
) -> AugmentedPrompt:
    """Render the reference-augmented prompt for plain (non-subject) generation."""
    if not prompt:
        raise ValueError("prompt must be non-empty")
    if not groups:
        raise ValueError("at least one reference group is required")
    if placeholder_style not in _PLACEHOLDER_RENDERERS:
        raise ConfigError(f"unknown placeholder style {placeholder_style!r}")
    total = sum(len(refs) for _, refs in groups)
    if max_images is not None and total > max_images:
        raise CapabilityError(f"{total} reference images exceed the backend cap of {max_images}")
    clause_text, images = _render_groups(groups, placeholder_style, start_index=1)
    return AugmentedPrompt(
        text=f"According to these examples of {clause_text}, generate {prompt}",
        images=images,
        groups=[(c, list(refs)) for c, refs in groups],
    )


def render_personalized(
    prompt: str,
    subject_image: str,
    groups: list[tuple[str, list[str]]],
    capabilities: BackendCapabilities,
    placeholder_style: str = PLACEHOLDER_INDEXED,
) -> AugmentedPrompt:
    """As render_template, with a user subject image as the first attachment.

    Personalization needs the backend to accept multiple images: one slot for
    the subject and at least one for a concept reference.
    """
    if not prompt:
        raise ValueError("prompt must be non-empty")
    if not subject_image:
        raise ValueError("subject image must be provided")
    if not capabilities.supports_personal_subject:
        raise CapabilityError("backend does not support a personal subject image")
    if not groups:
        raise CapabilityError("personalized generation needs at least one concept reference group")
    if placeholder_style not in _PLACEHOLDER_RENDERERS:
        raise ConfigError(f"unknown placeholder style {placeholder_style!r}")
    total = 1 + sum(len(refs) for _, refs in groups)
    if total > capabilities.max_reference_images:
        raise CapabilityError(
            f"subject plus {total - 1} references exceed the backend cap of "
            f"{capabilities.max_reference_images}"
        )
    render = _PLACEHOLDER_RENDERERS[placeholder_style]
    clause_text, images = _render_groups(groups, placeholder_style, start_index=2)
    return AugmentedPrompt(
        text=(
            f"The subject is {render(1)}. "
            f"According to these examples of {clause_text}, generate {prompt}"
        ),
        images=[subject_image, *images],
        groups=[(c, list(refs)) for c, refs in groups],
        subject_image=subject_image,
    )


def placeholder_indices(text: str, placeholder_style: str = PLACEHOLDER_INDEXED) -> list[int]:
    return [int(m) for m in _PLACEHOLDER_PATTERNS[placeholder_style].findall(text)]


def canonical_request(body: dict) -> bytes:
    return json.dumps(body, sort_keys=True, separators=(",", ":")).encode("utf-8")


def request_hash(body: dict) -> str:
    return hashlib.sha256(canonical_request(body)).hexdigest()


@dataclass
class GenerationOutput:
    data: bytes
    ext: str


class MockT2iClient:
    """Hash-deterministic stand-in: the artifact is a JSON manifest derived
    entirely from the request, so identical requests give identical bytes."""

    def __init__(self, profile: BackendProfile):
        self.profile = profile
        self.requests: list[dict] = []

    def generate(self, request: dict) -> GenerationOutput:
        self.requests.append(request)
        manifest = {
            "kind": "t2i-mock",
            "backend": self.profile.name,
            "request_hash": request_hash(request),
            "request": request,
        }
        data = json.dumps(manifest, sort_keys=True, indent=1).encode("utf-8")
        return GenerationOutput(data=data, ext="json")


class HttpT2iClient:
    """POST {prompt, images, params} to the profile endpoint; the response
    carries the image as base64, a data URI, or a fetchable URL."""

    def __init__(
        self,
        profile: BackendProfile,
        endpoint: str | None = None,
        timeout: float = 300.0,
        transport_retries: int = 1,
        api_key: str | None = None,
    ):
        self.profile = profile
        self.endpoint = endpoint or profile.endpoint
        if not self.endpoint:
            raise ConfigError(f"profile {profile.name!r} has no endpoint configured")
        self.timeout = timeout
        self.transport_retries = transport_retries
        self.api_key = api_key
        self.requests: list[dict] = []

    def generate(self, request: dict) -> GenerationOutput:
        self.requests.append(request)
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last: Exception | None = None
        for _ in range(self.transport_retries + 1):
            try:
                resp = requests.post(self.endpoint, json=request, headers=headers, timeout=self.timeout)
                resp.raise_for_status()
                return _decode_image_payload(resp.json(), self.timeout)
            except (requests.RequestException, KeyError, ValueError) as exc:
                last = exc
        raise TransportError(f"T2I request failed after {self.transport_retries + 1} attempts: {last}")


def _decode_image_payload(payload: dict, timeout: float) -> GenerationOutput:
    image = payload["image"]
    if image.startswith("data:"):
        header, _, encoded = image.partition(",")
        ext = header.split("/")[-1].split(";")[0] or "png"
        return GenerationOutput(data=base64.b64decode(encoded), ext=ext)
    if "://" in image:
        resp = requests.get(image, timeout=timeout)
        resp.raise_for_status()
        ext = image.rsplit(".", 1)[-1] if "." in image.rsplit("/", 1)[-1] else "png"
        return GenerationOutput(data=resp.content, ext=ext)
    return GenerationOutput(data=base64.b64decode(image), ext="png")


def generate(
    backend,
    req: AugmentedPrompt | str,
    params: GenerationParams | None = None,
    *,
    out_stem: str | Path,
) -> GenerationResult:
    """Send one generation request and store the artifact at ``<out_stem>.<ext>``.

    `req` is either a plain prompt string or a rendered AugmentedPrompt; the
    attachment count is checked against the backend profile before sending.
    """
    profile: BackendProfile = backend.profile
    if isinstance(req, AugmentedPrompt):
        prompt_text, images = req.text, list(req.images)
    else:
        prompt_text, images = req, []
    if not prompt_text:
        raise ValueError("prompt must be non-empty")
    cap = profile.capabilities.max_reference_images
    if len(images) > cap:
        raise CapabilityError(f"{len(images)} attachments exceed the {profile.name} cap of {cap}")

    params_used = (params or GenerationParams()).merged_over(profile.capabilities.default_params)
    body = {"prompt": prompt_text, "images": images, "params": params_used.to_wire()}
    output = backend.generate(body)

    out_path = Path(f"{out_stem}.{output.ext}")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_bytes(output.data)
    return GenerationResult(image=str(out_path), backend_request=body, params_used=params_used)
