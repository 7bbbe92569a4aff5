"""Deterministic signal description, prompt assembly, and profile generation."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.signal as sps

from .errors import ConfigError, DataError, MontageError, TransportError
from .signal_io import FREQ_BANDS, Recording
from .topology import BthHierarchy

DEFAULT_TOP_K = 3
WELCH_SECONDS = 2.0
SPAN_LOW = 0.5
SPAN_HIGH = 100.0

PROFILE_KEYS = (
    "Dataset Task Description",
    "Task Related Prior Knowledge",
    "Signal Physical Features",
    "Spatial Distribution Features",
    "Data Quality Notes",
    "Feature Summary",
)

PROMPT_SECTIONS = (
    "[System Instruction]",
    "[Data Summary]",
    "[Verbalized Features]",
    "[Analysis Requirements]",
    "[Output Format]",
)

REASK_SUFFIX = (
    "Reminder: your previous reply was not valid. Respond with only the JSON "
    "object containing exactly the six required keys, each with a non-empty "
    "string value."
)


def _fmt(value: float) -> str:
    """Render a number with 4 significant digits, locale-independent."""
    return f"{float(value):.4g}"


# ---------------------------------------------------------------------------
# feature records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TemporalStats:
    """Amplitude-distribution summary of one segment."""

    mean: float
    std: float
    energy: float
    peak_to_peak: float
    kurtosis: float
    degenerate: bool = False


@dataclass(frozen=True)
class SpectralStats:
    """Relative band powers plus the dominant spectral peak of one segment."""

    band_powers: dict[str, float]
    peak_freq: float
    peak_power: float
    degenerate: bool = False


@dataclass(frozen=True)
class RegionStats:
    """Mean of the member channels' temporal statistics for one region."""

    name: str
    n_channels: int
    mean: float
    std: float
    energy: float
    peak_to_peak: float
    kurtosis: float


@dataclass(frozen=True)
class ChannelRank:
    """One entry of the high-variance channel shortlist."""

    label: str
    variance: float


@dataclass(frozen=True)
class PhysicalFeatures:
    """Everything the verbalizer needs: temporal, spectral, spatial records."""

    global_stats: TemporalStats
    channel_stats: dict[str, TemporalStats]
    channel_spectra: dict[str, SpectralStats]
    region_stats: tuple[RegionStats, ...]
    top_channels: tuple[ChannelRank, ...]
    degenerate_channels: tuple[str, ...]


@dataclass(frozen=True)
class TaskMeta:
    """Recording-level context embedded in the prompt's data summary."""

    sample_name: str
    dataset_name: str
    task_logic: str
    num_channels: int
    num_samples: int


@dataclass(frozen=True)
class SemanticProfile:
    """Six free-text fields describing one recording."""

    task_description: str
    prior_knowledge: str
    physical_features: str
    spatial_features: str
    quality_notes: str
    summary: str

    def to_dict(self) -> dict[str, str]:
        return dict(zip(PROFILE_KEYS, self.as_tuple()))

    def as_tuple(self) -> tuple[str, ...]:
        return (
            self.task_description,
            self.prior_knowledge,
            self.physical_features,
            self.spatial_features,
            self.quality_notes,
            self.summary,
        )

    @staticmethod
    def from_dict(record: dict) -> "SemanticProfile":
        missing = [k for k in PROFILE_KEYS if k not in record]
        if missing:
            raise DataError(f"profile record is missing keys {missing}")
        values = []
        for key in PROFILE_KEYS:
            val = record[key]
            if not isinstance(val, str) or not val.strip():
                raise DataError(f"profile field {key!r} must be a non-empty string")
            values.append(val)
        return SemanticProfile(*values)

    def flat_text(self) -> str:
        """All six fields joined in key order, ready for tokenization."""
        return " ".join(self.as_tuple())


@dataclass(frozen=True)
class ProfileResult:
    """A parsed profile plus how many re-asks it took to obtain it."""

    profile: SemanticProfile
    retries: int
    raw: str = field(repr=False, default="")


# ---------------------------------------------------------------------------
# feature extraction
# ---------------------------------------------------------------------------


def temporal_stats(x: np.ndarray) -> TemporalStats:
    """Mean, population std, energy, peak-to-peak, and kurtosis of a segment."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size < 2:
        raise ConfigError(f"temporal statistics need at least 2 samples, got {x.size}")
    mu = float(x.mean())
    sigma = float(x.std())
    energy = float(np.sum(x * x))
    p2p = float(x.max() - x.min())
    if sigma > 0.0:
        kurt = float(np.mean(((x - mu) / sigma) ** 4))
        degenerate = False
    else:
        kurt = 0.0
        degenerate = True
    return TemporalStats(mu, sigma, energy, p2p, kurt, degenerate)


def spectral_stats(x: np.ndarray, fs: float) -> SpectralStats:
    """Relative power in the five canonical bands plus the dominant peak."""
    x = np.asarray(x, dtype=np.float64).ravel()
    nperseg = int(round(WELCH_SECONDS * fs))
    if x.size < nperseg:
        raise ConfigError(
            f"spectral statistics need at least {nperseg} samples "
            f"({WELCH_SECONDS:g} s at {fs:g} Hz), got {x.size}"
        )
    freqs, psd = sps.welch(x, fs=fs, window="hann", nperseg=nperseg, noverlap=nperseg // 2)
    nyq = fs / 2.0
    span_hi = min(SPAN_HIGH, nyq)
    span_mask = (freqs >= SPAN_LOW) & (freqs <= span_hi)
    total = float(psd[span_mask].sum())
    names = list(FREQ_BANDS)
    powers: dict[str, float] = {}
    for i, name in enumerate(names):
        lo, hi = FREQ_BANDS[name]
        hi = min(hi, span_hi)
        if lo >= hi:
            powers[name] = 0.0
            continue
        if i == len(names) - 1:
            mask = (freqs >= lo) & (freqs <= hi)
        else:
            mask = (freqs >= lo) & (freqs < hi)
        powers[name] = float(psd[mask].sum() / total) if total > 0.0 else 0.0
    peak_idx = int(np.argmax(psd))
    return SpectralStats(
        band_powers=powers,
        peak_freq=float(freqs[peak_idx]),
        peak_power=float(psd[peak_idx]),
        degenerate=total <= 0.0,
    )


def spatial_summary(
    rec: Recording, hier: BthHierarchy, k: int = DEFAULT_TOP_K
) -> tuple[tuple[RegionStats, ...], tuple[ChannelRank, ...]]:
    """Region-level aggregates plus the Top-K channels by signal variance."""
    if k < 1:
        raise ConfigError(f"top-k channel count must be >= 1, got {k}")
    if rec.channels != hier.montage.labels:
        raise MontageError(
            f"recording channels {list(rec.channels)[:4]}... do not match the "
            f"montage ({hier.montage.n_channels} channels); configure the "
            f"montage the recording was made with"
        )
    stats = [temporal_stats(row) for row in rec.data]
    stat_rows = np.array(
        [[s.mean, s.std, s.energy, s.peak_to_peak, s.kurtosis] for s in stats]
    )
    regions = []
    for level in (2, 3):
        mean_mat = hier.mean_matrix(level)
        agg = mean_mat @ stat_rows
        counts = (mean_mat > 0).sum(axis=1)
        for name, row, count in zip(hier.group_names[level - 1], agg, counts):
            regions.append(RegionStats(name, int(count), *(float(v) for v in row)))
    variances = rec.data.var(axis=1)
    order = np.argsort(-variances, kind="stable")[: min(k, rec.n_channels)]
    top = tuple(ChannelRank(rec.channels[i], float(variances[i])) for i in order)
    return tuple(regions), top


def extract_features(
    rec: Recording, hier: BthHierarchy, k: int = DEFAULT_TOP_K
) -> PhysicalFeatures:
    """Run the temporal, spectral, and spatial operators over a recording."""
    channel_stats = {lab: temporal_stats(row) for lab, row in zip(rec.channels, rec.data)}
    channel_spectra = {
        lab: spectral_stats(row, rec.fs) for lab, row in zip(rec.channels, rec.data)
    }
    regions, top = spatial_summary(rec, hier, k)
    degenerate = tuple(
        lab
        for lab in rec.channels
        if channel_stats[lab].degenerate or channel_spectra[lab].degenerate
    )
    return PhysicalFeatures(
        global_stats=temporal_stats(rec.data.ravel()),
        channel_stats=channel_stats,
        channel_spectra=channel_spectra,
        region_stats=regions,
        top_channels=top,
        degenerate_channels=degenerate,
    )


# ---------------------------------------------------------------------------
# verbalization and prompt assembly
# ---------------------------------------------------------------------------


def verbalize(features: PhysicalFeatures) -> str:
    """Render extracted features as deterministic English sentences."""
    g = features.global_stats
    lines = [
        "1. Temporal statistics: global mean "
        f"{_fmt(g.mean)}, std {_fmt(g.std)}, energy {_fmt(g.energy)}, "
        f"peak-to-peak {_fmt(g.peak_to_peak)}, kurtosis {_fmt(g.kurtosis)}."
    ]
    spectra = list(features.channel_spectra.values())
    mean_peak_freq = float(np.mean([s.peak_freq for s in spectra]))
    mean_peak_power = float(np.mean([s.peak_power for s in spectra]))
    band_means = {
        name: float(np.mean([s.band_powers[name] for s in spectra]))
        for name in FREQ_BANDS
    }
    band_text = ", ".join(f"{name} {_fmt(v)}" for name, v in band_means.items())
    lines.append(
        f"2. Spectral features: mean peak frequency {_fmt(mean_peak_freq)} Hz, "
        f"mean peak power {_fmt(mean_peak_power)}; mean relative band powers: "
        f"{band_text}."
    )
    for entry in features.top_channels:
        spec = features.channel_spectra[entry.label]
        dominant = max(spec.band_powers, key=spec.band_powers.get)
        lines.append(
            f"   Channel {entry.label}: peak frequency {_fmt(spec.peak_freq)} Hz, "
            f"peak power {_fmt(spec.peak_power)}, dominant band {dominant} "
            f"(relative power {_fmt(spec.band_powers[dominant])})."
        )
    region_text = "; ".join(
        f"{r.name} ({r.n_channels} ch): mean {_fmt(r.mean)}, std {_fmt(r.std)}, "
        f"energy {_fmt(r.energy)}"
        for r in features.region_stats
    )
    top_text = ", ".join(
        f"{e.label} (variance {_fmt(e.variance)})" for e in features.top_channels
    )
    lines.append(f"3. Spatial features: regions {region_text}.")
    lines.append(f"   Highest-variance channels: {top_text}.")
    if features.degenerate_channels:
        flagged = ", ".join(features.degenerate_channels)
        lines.append(
            f"4. Quality notes: flat channel detected with zero variance: {flagged}."
        )
    else:
        lines.append("4. Quality notes: no flat or degenerate channels detected.")
    return "\n".join(lines)


def _scan_for_labels(text: str, vocabulary: tuple[str, ...], where: str) -> None:
    lowered = text.lower()
    for label in vocabulary:
        if label and label.lower() in lowered:
            raise ConfigError(
                f"classification label {label!r} would leak into the prompt via {where}"
            )


def build_prompt(
    meta: TaskMeta, s_desc: str, label_vocabulary: tuple[str, ...] = ()
) -> str:
    """Assemble the five-section analysis prompt; refuses label leakage."""
    for field_name, value in (
        ("sample_name", meta.sample_name),
        ("dataset_name", meta.dataset_name),
        ("task_logic", meta.task_logic),
    ):
        _scan_for_labels(str(value), label_vocabulary, f"task metadata field {field_name!r}")
    prompt = (
        "[System Instruction]\n"
        "You are a careful EEG signal data analyst. Produce a purely objective,\n"
        "technical report from the statistics below. The report has two parts:\n"
        "first a general textbook-style background for this kind of recording,\n"
        "then an objective description of the measured physical features.\n"
        "You are strictly prohibited from performing clinical diagnosis, naming\n"
        "diseases, or inferring any classification label.\n"
        "\n"
        "[Data Summary]\n"
        f"- Sample name: {meta.sample_name}\n"
        f"- Dataset name: {meta.dataset_name}\n"
        f"- Task logic: {meta.task_logic}\n"
        f"- Channel count: {meta.num_channels}\n"
        f"- Time series length: {meta.num_samples}\n"
        "\n"
        "[Verbalized Features]\n"
        f"{s_desc}\n"
        "\n"
        "[Analysis Requirements]\n"
        "1. Dataset task description: describe the general experimental paradigm.\n"
        "2. Task-related prior knowledge: list relevant neuroscience background.\n"
        "3. Signal physical features: objectively describe the temporal,\n"
        "   spectral, and spatial characteristics reported above.\n"
        "\n"
        "[Output Format]\n"
        "Respond strictly in the following JSON format:\n"
        "{\n"
        '  "Dataset Task Description": "general experimental paradigm",\n'
        '  "Task Related Prior Knowledge": "general neuroscience background",\n'
        '  "Signal Physical Features": "purely objective description",\n'
        '  "Spatial Distribution Features": "prominent regions and channels",\n'
        '  "Data Quality Notes": "outlier channels or noise notes",\n'
        '  "Feature Summary": "morphology summary with no diagnosis"\n'
        "}\n"
    )
    _scan_for_labels(prompt, label_vocabulary, "the assembled prompt")
    return prompt


# ---------------------------------------------------------------------------
# clients and profile generation
# ---------------------------------------------------------------------------


class LlmClient:
    """Interface for text-completion backends."""

    def complete(self, prompt: str) -> str:
        raise NotImplementedError


class StubClient(LlmClient):
    """Offline backend that derives a profile from the prompt itself."""

    def complete(self, prompt: str) -> str:
        fields = {"Sample name": "", "Dataset name": "", "Task logic": ""}
        for line in prompt.splitlines():
            stripped = line.strip().lstrip("- ")
            for key in fields:
                if stripped.startswith(key + ":"):
                    fields[key] = stripped.split(":", 1)[1].strip()
        sections = {"1.": "", "2.": "", "3.": "", "4.": ""}
        in_features = False
        for line in prompt.splitlines():
            if line.startswith("[Verbalized Features]"):
                in_features = True
                continue
            if line.startswith("[Analysis Requirements]"):
                break
            if in_features:
                stripped = line.strip()
                for prefix in sections:
                    if stripped.startswith(prefix):
                        sections[prefix] = stripped[len(prefix):].strip()
        record = {
            "Dataset Task Description": (
                f"Recordings from dataset {fields['Dataset name'] or 'unknown'} "
                f"collected for the task: {fields['Task logic'] or 'unspecified'}."
            ),
            "Task Related Prior Knowledge": (
                "Scalp potentials are conventionally split into delta, theta, "
                "alpha, beta, and gamma rhythms whose relative power varies "
                "with brain state and recording conditions."
            ),
            "Signal Physical Features": (
                f"{sections['1.'] or 'Temporal statistics unavailable.'} "
                f"{sections['2.'] or 'Spectral statistics unavailable.'}"
            ),
            "Spatial Distribution Features": (
                sections["3."] or "Spatial statistics unavailable."
            ),
            "Data Quality Notes": sections["4."] or "No quality information supplied.",
            "Feature Summary": (
                f"The dominant spectral profile is: "
                f"{sections['2.'] or 'not characterised'}"
            ),
        }
        return json.dumps(record)


class HttpClient(LlmClient):
    """Backend posting to a chat-completions-style JSON endpoint."""

    def __init__(
        self,
        endpoint: str,
        model: str = "",
        token_env: str = "EEGLM_LLM_TOKEN",
        timeout: float = 30.0,
        max_tokens: int = 1024,
    ):
        self.endpoint = endpoint
        self.model = model
        self.token_env = token_env
        self.timeout = timeout
        self.max_tokens = max_tokens

    def complete(self, prompt: str) -> str:
        import requests

        body = {"prompt": prompt, "max_tokens": self.max_tokens, "temperature": 0}
        if self.model:
            body["model"] = self.model
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_env, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"
        try:
            resp = requests.post(
                self.endpoint, json=body, headers=headers, timeout=self.timeout
            )
        except requests.RequestException as exc:
            raise TransportError(f"profile endpoint unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise TransportError(
                f"profile endpoint returned HTTP {resp.status_code}: {resp.text[:200]}"
            )
        try:
            payload = resp.json()
        except ValueError as exc:
            raise TransportError("profile endpoint returned non-JSON body") from exc
        if isinstance(payload, dict):
            if isinstance(payload.get("text"), str):
                return payload["text"]
            choices = payload.get("choices")
            if isinstance(choices, list) and choices:
                first = choices[0]
                if isinstance(first.get("text"), str):
                    return first["text"]
                message = first.get("message", {})
                if isinstance(message.get("content"), str):
                    return message["content"]
        raise TransportError("profile endpoint response has no completion text")


def parse_profile(text: str) -> SemanticProfile:
    """Parse a completion into the six-field profile record."""
    candidate = text.strip()
    try:
        record = json.loads(candidate)
    except ValueError:
        start, end = candidate.find("{"), candidate.rfind("}")
        if start < 0 or end <= start:
            raise DataError(f"no JSON object found in completion: {text[:200]!r}")
        try:
            record = json.loads(candidate[start : end + 1])
        except ValueError:
            raise DataError(f"completion is not valid JSON: {text[:200]!r}")
    if not isinstance(record, dict):
        raise DataError(f"completion JSON is not an object: {text[:200]!r}")
    return SemanticProfile.from_dict(record)


def generate_profile(
    prompt: str, client: LlmClient, max_retries: int = 2
) -> ProfileResult:
    """Send the prompt, parse the reply, and re-ask on malformed output."""
    current = prompt
    last_error = ""
    raw = ""
    for attempt in range(max_retries + 1):
        raw = client.complete(current)
        try:
            return ProfileResult(parse_profile(raw), retries=attempt, raw=raw)
        except DataError as exc:
            last_error = str(exc)
            current = prompt + "\n\n" + REASK_SUFFIX
    raise DataError(
        f"profile output stayed malformed after {max_retries} retries: {last_error}"
    )
