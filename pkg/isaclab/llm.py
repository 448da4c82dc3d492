"""LLM-assisted reward design.

Prompt assembly with retrieved knowledge snippets, one chat-completion
request over HTTP, and extraction of a validated reward expression from the
reply. Wire format (request body):

    {"model": str, "temperature": float,
     "messages": [{"role": "system", "content": str},
                  {"role": "user", "content": str}]}

and the reply is read from ``choices[0].message.content``.
"""

import logging
import os
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import httpx

from isaclab import reward as dsl
from isaclab.knowledge import default_store, retrieve

logger = logging.getLogger(__name__)

DEFAULT_OBJECTIVE = (
    "Maximize the downlink sum communication rate and minimize the Cramer-Rao bound "
    "of the target angle by optimizing the active beamforming matrix of the base "
    "station, subject to the total transmit power constraint of the base station.")

SYSTEM_MESSAGE = (
    "You design reward functions for reinforcement learning agents that control "
    "wireless base stations. You answer with one reward expression only.")


class LlmError(Exception):
    pass


class LlmTransportError(LlmError):
    pass


class LlmTimeoutError(LlmTransportError):
    pass


class LlmAuthError(LlmError):
    pass


class OfflineError(LlmError):
    """Network access requested while running offline."""


class ExtractionError(LlmError):
    """No usable reward expression in a reply.

    `kind` is one of "no-candidate", "parse-failure", "unknown-feature";
    `inner` carries the ParseError when there is one. `design_reward` attaches
    the prompt `bundle` and the `response` so the failed exchange can still be
    written out.
    """
    def __init__(self, kind, message, inner=None):
        super().__init__("{}: {}".format(kind, message))
        self.kind = kind
        self.inner = inner
        self.bundle = None
        self.response = None


@dataclass(frozen=True)
class PromptBundle:
    system_description: str
    objective_statement: str
    dsl_reference: str
    retrieved_snippets: tuple
    full_prompt: str


@dataclass(frozen=True)
class LlmResponse:
    raw_text: str
    extracted_source: Optional[str]
    expr: Optional[dsl.RewardExpr]
    provider_meta: Dict[str, Any] = field(default_factory=dict)
    error: Optional[ExtractionError] = None


def dsl_reference():
    """Grammar summary and the feature list, one feature per line."""
    lines = [
        "Reward expression language:",
        "- numbers: decimal or scientific literals (0.5, 1e-3)",
        "- operators: + - * / ^ and unary minus; parentheses group",
        "- precedence: unary minus, then ^ (right associative), then * /, then + -",
        "- functions: log10(x), ln(x), exp(x), abs(x), tanh(x), min(x, y), max(x, y),"
        " clip(x, lo, hi) with numeric lo <= hi",
        "- division by zero and logarithms of non-positive values are errors",
        "- the result is clipped to [-100, 100]",
        "Available features:",
    ]
    lines += ["- " + line for line in dsl.feature_reference()]
    return "\n".join(lines)


def render_system_description(config):
    users = ", ".join("{:g} m".format(d) for d in config.user_distances_m)
    channel = ("Rayleigh fading" if config.rician_k == 0
               else "Rician fading with K-factor {:g}".format(config.rician_k))
    return "\n".join([
        "A dual-functional base station with a {}-element uniform linear array "
        "(half-wavelength spacing) serves {} single-antenna downlink users and senses "
        "one point target.".format(config.n_antennas, config.n_users),
        "User distances: {}; path-loss exponent {:g}; {} with temporal correlation "
        "{:g} between steps.".format(users, config.pathloss_exponent, channel,
                                     config.channel_corr),
        "Target at {:g} degrees azimuth, reflection amplitude {:g}, {} sensing "
        "snapshots per step.".format(config.target_angle_deg, abs(config.target_gain),
                                     config.snapshots),
        "Transmit power budget {:g} dBm ({:.4g} W); noise power {:.3g} W.".format(
            config.p_max_dbm, config.p_max, config.noise_power),
        "Episodes last {} steps; the agent outputs the complex beamforming matrix, "
        "which is scaled down to the power budget when it exceeds it.".format(
            config.episode_len),
    ])


def build_prompt(config, objective=DEFAULT_OBJECTIVE, store=None, top_k=3):
    """Assemble the reward-design prompt. Deterministic in its inputs."""
    description = render_system_description(config)
    reference = dsl_reference()
    snippets = tuple(retrieve(store, objective, top_k)) if store is not None else ()

    parts = [
        "System model:",
        description,
        "",
        "Optimization problem:",
        objective,
        "",
    ]
    if snippets:
        parts.append("Background knowledge:")
        for s in snippets:
            parts.append("[{}] {}".format(s.doc_id, s.excerpt))
        parts.append("")
    parts += [
        reference,
        "",
        "Task: design a reward function for this optimization problem.",
        "- Reward higher rate and lower CRB at the same time.",
        "- Respect the transmit power constraint of the base station.",
        "- Account for the difference in magnitude between the communication rate and "
        "the CRB so that neither term dominates.",
        "- Answer with exactly one expression of the language above inside a fenced "
        "code block (```), and nothing else inside the block.",
    ]
    return PromptBundle(system_description=description,
                        objective_statement=objective,
                        dsl_reference=reference,
                        retrieved_snippets=snippets,
                        full_prompt="\n".join(parts))


# Extraction

_FENCE_RE = re.compile(r"```(?:[^\n`]*\n)?(.*?)```", re.DOTALL)
_DSL_RUN_RE = re.compile(r"[A-Za-z0-9_.+\-*/^(), \t]+")
_MAX_SUBSTRING_ATTEMPTS = 20000


def _strip_assignment(text):
    # Tolerate "r = <expr>" and "reward = <expr>" inside a fence.
    m = re.match(r"\s*[A-Za-z_][A-Za-z0-9_]*\s*=(?!=)\s*(.*)$", text, re.DOTALL)
    return m.group(1) if m else text


def _extract_fenced(block):
    source = " ".join(_strip_assignment(block.strip()).split())
    try:
        expr = dsl.parse(source)
    except dsl.ParseError as e:
        kind = ("unknown-feature" if e.kind is dsl.ParseErrorKind.UNKNOWN_FEATURE
                else "parse-failure")
        raise ExtractionError(kind, "fenced block does not parse: {}".format(e), e) from e
    return source, expr


def _longest_parsing_substring(text):
    best = None
    attempts = 0
    for run in _DSL_RUN_RE.finditer(text):
        chunk = run.group()
        starts = [i for i, ch in enumerate(chunk) if not ch.isspace()
                  and (i == 0 or not (chunk[i - 1].isalnum() or chunk[i - 1] in "_."))]
        for start in starts:
            for end in range(len(chunk), start, -1):
                candidate = chunk[start:end].strip()
                if not candidate or (best is not None and len(candidate) <= len(best[0])):
                    break
                attempts += 1
                if attempts > _MAX_SUBSTRING_ATTEMPTS:
                    return best
                try:
                    expr = dsl.parse(candidate)
                except dsl.ParseError:
                    continue
                if expr.features():
                    best = (candidate, expr)
                    break
    return best


def extract_expression(raw_text):
    """Pull one validated reward expression out of free text.

    The first fenced block wins; without one, the longest substring that
    parses and references at least one feature.
    """
    fence = _FENCE_RE.search(raw_text)
    if fence is not None:
        return _extract_fenced(fence.group(1))
    found = _longest_parsing_substring(raw_text)
    if found is None:
        raise ExtractionError("no-candidate", "no reward expression found in reply")
    return found


# Transport

def _auth_token(endpoint):
    token = os.environ.get(endpoint.token_env, "").strip()
    if not token:
        raise LlmAuthError("environment variable {} is not set".format(endpoint.token_env))
    return token


def request_reward(bundle, endpoint, client=None, sleep=time.sleep):
    """One blocking chat-completion request with up to `endpoint.retries`
    retries on transport failures. Extraction problems are recorded in the
    response, never replaced by a fallback.
    """
    token = _auth_token(endpoint)
    body = {
        "model": endpoint.model,
        "temperature": endpoint.temperature,
        "messages": [
            {"role": "system", "content": SYSTEM_MESSAGE},
            {"role": "user", "content": bundle.full_prompt},
        ],
    }
    headers = {"Authorization": "Bearer " + token}
    owned = client is None
    if owned:
        client = httpx.Client(timeout=endpoint.timeout)
    try:
        payload, attempts = _post_with_retries(client, endpoint, body, headers, sleep)
    finally:
        if owned:
            client.close()

    try:
        raw_text = payload["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as e:
        raise LlmTransportError("malformed chat-completion reply: {!r}".format(e)) from e
    if not isinstance(raw_text, str):
        raise LlmTransportError("reply content is not text")

    meta = {"model": payload.get("model", endpoint.model), "id": payload.get("id"),
            "usage": payload.get("usage"), "attempts": attempts}
    try:
        source, expr = extract_expression(raw_text)
    except ExtractionError as e:
        logger.warning("LLM reply held no usable expression: %s", e)
        meta["extraction_error"] = str(e)
        return LlmResponse(raw_text=raw_text, extracted_source=None, expr=None,
                           provider_meta=meta, error=e)
    return LlmResponse(raw_text=raw_text, extracted_source=source, expr=expr,
                       provider_meta=meta)


def _post_with_retries(client, endpoint, body, headers, sleep):
    last = None
    for attempt in range(endpoint.retries + 1):
        if attempt:
            delay = 2.0 ** (attempt - 1)
            logger.warning("retrying LLM request in %.0f s (attempt %d): %s",
                           delay, attempt + 1, last)
            sleep(delay)
        logger.info("requesting reward design from %s (%s)", endpoint.url, endpoint.model)
        try:
            response = client.post(endpoint.url, json=body, headers=headers,
                                   timeout=endpoint.timeout)
        except httpx.TimeoutException as e:
            last = LlmTimeoutError("no reply within {:g} s".format(endpoint.timeout))
            last.__cause__ = e
            continue
        except httpx.TransportError as e:
            last = LlmTransportError("transport failure: {}".format(e))
            last.__cause__ = e
            continue
        if response.status_code in (401, 403):
            raise LlmAuthError("endpoint rejected credentials (HTTP {})"
                               .format(response.status_code))
        if response.status_code == 429 or response.status_code >= 500:
            last = LlmTransportError("HTTP {}".format(response.status_code))
            continue
        if response.status_code >= 400:
            raise LlmTransportError("HTTP {}: {}".format(response.status_code,
                                                         response.text[:200]))
        try:
            return response.json(), attempt + 1
        except ValueError as e:
            raise LlmTransportError("reply is not JSON") from e
    raise last


# Reward selection

@dataclass
class RewardProvenance:
    """How the reward of a run came to be."""
    mode: str
    expr: dsl.RewardExpr
    file_text: Optional[str] = None
    bundle: Optional[PromptBundle] = None
    response: Optional[LlmResponse] = None
    notes: List[str] = field(default_factory=list)

    @property
    def canonical(self):
        return self.expr.canonical()


def design_reward(config, mode, shaping=None, endpoint=None, store=None,
                  offline=False, client=None, sleep=time.sleep):
    """Select and build the reward for a run.

    :param mode: "llm", "fallback", "manual" or "file:PATH"
    :param offline: forbid network access; only an error for mode "llm"
    """
    if mode == "fallback":
        expr = dsl.builtin_normalized_reward(shaping)
        provenance = RewardProvenance(mode=mode, expr=expr)
    elif mode == "manual":
        provenance = RewardProvenance(mode=mode, expr=dsl.builtin_manual_reward())
    elif mode.startswith("file:"):
        text = Path(mode[len("file:"):]).read_text(encoding="utf-8")
        provenance = RewardProvenance(mode=mode, expr=dsl.parse(text.strip()), file_text=text)
    elif mode == "llm":
        if offline:
            raise OfflineError("reward mode 'llm' needs network access")
        if endpoint is None:
            from isaclab.config import LlmEndpoint
            endpoint = LlmEndpoint()
        if store is None:
            store = default_store()
        bundle = build_prompt(config, DEFAULT_OBJECTIVE, store, endpoint.top_k)
        response = request_reward(bundle, endpoint, client=client, sleep=sleep)
        if response.expr is None:
            error = response.error
            error.bundle, error.response = bundle, response
            raise error
        provenance = RewardProvenance(mode=mode, expr=response.expr, bundle=bundle,
                                      response=response)
    else:
        raise ValueError("unknown reward mode {!r}".format(mode))
    logger.info("reward (%s): %s", mode, provenance.canonical)
    return provenance


def obtain_reward(config, mode, **kwargs):
    return design_reward(config, mode, **kwargs).expr


def write_exchange(bundle, response, directory):
    """Write the prompt and raw reply verbatim; either may be missing."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if bundle is not None:
        (directory / "prompt.txt").write_text(bundle.full_prompt, encoding="utf-8")
    if response is not None:
        (directory / "response.txt").write_text(response.raw_text, encoding="utf-8")


def write_transcript(provenance, directory):
    """Persist prompt and raw reply verbatim next to the run's artifacts."""
    write_exchange(provenance.bundle, provenance.response, directory)
    (Path(directory) / "reward.txt").write_text(provenance.canonical + "\n", encoding="utf-8")
