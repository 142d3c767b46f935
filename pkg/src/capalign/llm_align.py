"""LLM fine-tuning dataset construction and caption expansion.

Two dataset serializations are produced from prompt-completion pairs: JSON
records (prompt gets a single leading space on disk) and pad-separated
concatenations.  Caption expansion calls a text-completion backend -- either
a deterministic seeded mock or a real HTTP endpoint -- with bounded retries,
and memoizes every response in an append-only cache so reruns are
bit-identical and touch the network zero times.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import requests

from .corpus import PromptCompletionPair
from .tokenizer import split_words, truncate_words

API_KEY_ENV_VAR = "CAPALIGN_API_KEY"

DEFAULT_MAX_NEW_TOKENS = 512
DEFAULT_RETRIES = 3
DEFAULT_BACKOFF_BASE = 0.5
DEFAULT_CONCURRENCY = 4
DEFAULT_PROMPT_TEMPLATE = (
    "Rewrite and extend the following dermatology image caption in plain "
    "descriptive language, keeping every clinical finding: {caption}"
)


class PadCollision(Exception):
    """The pad literal occurs inside a prompt or completion."""


class BackendUnavailable(Exception):
    """The expansion backend failed every allowed attempt."""


class EmptyResponse(Exception):
    """The expansion backend returned no text."""


class TransientBackendError(Exception):
    """Retryable backend failure (connection error or server-side 5xx)."""


@dataclass(frozen=True)
class LmRecord:
    prompt: str
    completion: str

    def __post_init__(self):
        if not self.prompt or not self.completion:
            raise ValueError("prompt and completion must be non-empty")


@dataclass(frozen=True)
class ConcatRecord:
    text: str


@dataclass(frozen=True)
class ExpansionRequest:
    caption: str
    max_new_tokens: int = DEFAULT_MAX_NEW_TOKENS
    backend: str = "mock"  # "mock" or an http(s) endpoint URL
    seed: int = 0  # consumed by the mock backend only

    def __post_init__(self):
        if not self.caption:
            raise ValueError("caption must be non-empty")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")


@dataclass(frozen=True)
class ExpansionResult:
    original: str
    expanded: str
    backend_name: str
    cached: bool


def make_lm_records(pairs: list[PromptCompletionPair]) -> list[LmRecord]:
    """One record per pair, order preserved."""
    return [LmRecord(prompt=p.prompt, completion=p.completion) for p in pairs]


def serialize_lm_record(record: LmRecord) -> str:
    """JSON line; the prompt is emitted with exactly one leading space."""
    return json.dumps(
        {"prompt": " " + record.prompt, "completion": record.completion},
        ensure_ascii=False,
    )


def make_concat_records(
    pairs: list[PromptCompletionPair], pad_literal: str
) -> list[ConcatRecord]:
    """Join each prompt and completion into one string separated by the pad literal.

    Raises PadCollision if the literal already occurs in any prompt or
    completion (splitting on it must recover the original pair).
    """
    if not pad_literal:
        raise ValueError("pad_literal must be non-empty")
    records = []
    for i, pair in enumerate(pairs):
        if pad_literal in pair.prompt or pad_literal in pair.completion:
            raise PadCollision(
                f"pad literal {pad_literal!r} occurs in pair {i} of doc {pair.doc_id}"
            )
        records.append(ConcatRecord(text=pair.prompt + pad_literal + pair.completion))
    return records


def write_lm_records(records: list[LmRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(serialize_lm_record(record) + "\n")


def write_concat_records(records: list[ConcatRecord], path) -> None:
    # One record per line; internal newlines would break the framing.
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(record.text.replace("\r", " ").replace("\n", " ") + "\n")


# --- expansion backends ----------------------------------------------------

# Short clinical-description sentences the mock backend samples from.  The
# vocabulary deliberately mirrors the concept lexicon used downstream so mock
# expansions have a realistic shape.
PHRASE_BANK = (
    "The lesion presents as a well-demarcated erythematous plaque with overlying scale.",
    "Multiple firm papules are scattered over the affected area.",
    "A solitary nodule with central umbilication is noted.",
    "Surrounding skin shows diffuse erythema and mild edema.",
    "There is a shallow erosion with a friable base and serous crust.",
    "Fine telangiectasia is visible at the periphery of the lesion.",
    "The surface is dry and xerotic with accentuated skin markings.",
    "Vesicles and small bullae have ruptured, leaving honey-colored crust.",
    "Hyperpigmented macules coalesce into a reticulate patch.",
    "The border is raised and indurated with central atrophy.",
    "Excoriations suggest significant pruritus in the region.",
    "A purpuric component is present without blanching on pressure.",
    "Lichenification indicates chronic rubbing of the site.",
    "The plaque shows silvery scale typical of a papulosquamous process.",
    "An annular configuration with central clearing is apparent.",
    "Satellite pustules surround the primary lesion.",
    "The nodule is dome-shaped with a smooth translucent surface.",
    "Deep fissures cross the hyperkeratotic plaque.",
    "There is an ulcer with rolled borders and a granulating base.",
    "Comedones are admixed with inflammatory papules.",
    "The patch is hypopigmented with a fine wrinkled surface.",
    "A wheal-like swelling appeared transiently around the site.",
    "Yellowish exudate covers part of the eroded surface.",
    "Scarring and post-inflammatory hyperpigmentation remain at older sites.",
    "The eruption is symmetric and favors extensor surfaces.",
    "Dermoscopy shows a regular pigment network without atypia.",
    "No regional lymphadenopathy is associated with the lesion.",
    "The condition has waxed and waned over several months.",
    "Topical therapy produced partial flattening of the plaque.",
    "Biopsy of the indurated edge is recommended to confirm the diagnosis.",
)


class MockBackend:
    """Offline stand-in for a text-completion endpoint.

    Output is a pseudo-random sample of phrase-bank sentences, seeded from
    (seed, prompt) so identical requests are identical across processes.
    """

    def __init__(self):
        self.name = "mock"
        self.requests = 0

    def complete(self, prompt: str, max_new_tokens: int, seed: int = 0) -> str:
        self.requests += 1
        digest = hashlib.sha256(f"{seed}\x00{prompt}".encode("utf-8")).digest()
        rng = random.Random(int.from_bytes(digest[:8], "big"))
        n_sentences = rng.randint(2, 4)
        sentences = [rng.choice(PHRASE_BANK) for _ in range(n_sentences)]
        return " " + " ".join(sentences)


class HttpBackend:
    """Client for a single text-completion endpoint.

    Wire contract: POST {"prompt": str, "max_new_tokens": int} -> {"text": str}.
    The bearer credential is read from the environment (never from arguments
    or files); requests are sent without one when the variable is unset.
    """

    def __init__(self, url: str, timeout: float = 30.0):
        self.name = url
        self.url = url
        self.timeout = timeout
        self.requests = 0

    def complete(self, prompt: str, max_new_tokens: int, seed: int = 0) -> str:
        self.requests += 1
        headers = {}
        api_key = os.environ.get(API_KEY_ENV_VAR)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        try:
            response = requests.post(
                self.url,
                json={"prompt": prompt, "max_new_tokens": max_new_tokens},
                headers=headers,
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise TransientBackendError(str(exc)) from exc
        if response.status_code >= 500:
            raise TransientBackendError(f"server error {response.status_code}")
        if response.status_code != 200:
            raise BackendUnavailable(
                f"endpoint {self.url} answered {response.status_code}"
            )
        return str(response.json().get("text", ""))


def resolve_backend(descriptor: str):
    if descriptor == "mock":
        return MockBackend()
    if descriptor.startswith(("http://", "https://")):
        return HttpBackend(descriptor)
    raise ValueError(f"unknown backend descriptor {descriptor!r}")


class ExpansionCache:
    """Append-only file of expansion request/response records.

    Keyed by (backend_name, caption, max_new_tokens, seed); loading replays
    the file, so a partially completed run resumes where it stopped.
    """

    def __init__(self, path=None):
        self._path = path
        self._entries: dict[tuple, str] = {}
        self._lock = threading.Lock()
        if path is not None and os.path.exists(path):
            with open(path, encoding="utf-8") as f:
                for line in f:
                    if not line.strip():
                        continue
                    rec = json.loads(line)
                    key = (
                        rec["backend"],
                        rec["caption"],
                        rec["max_new_tokens"],
                        rec["seed"],
                    )
                    self._entries[key] = rec["expanded"]

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, key: tuple) -> str | None:
        with self._lock:
            return self._entries.get(key)

    def put(self, key: tuple, expanded: str) -> str:
        """Record a response; returns the winning entry if another thread raced us."""
        with self._lock:
            existing = self._entries.get(key)
            if existing is not None:
                return existing
            self._entries[key] = expanded
            if self._path is not None:
                backend, caption, max_new_tokens, seed = key
                record = {
                    "backend": backend,
                    "caption": caption,
                    "max_new_tokens": max_new_tokens,
                    "seed": seed,
                    "expanded": expanded,
                }
                with open(self._path, "a", encoding="utf-8") as f:
                    f.write(json.dumps(record, ensure_ascii=False) + "\n")
                    f.flush()
            return expanded


class CaptionExpander:
    """Expands captions through a completion backend with caching and retries.

    At most ``retries`` network attempts are made per request, sleeping
    ``backoff_base * 2**k`` between attempt k and k+1; exhaustion raises
    BackendUnavailable.  Batch expansion fans out to ``concurrency`` worker
    threads, but results always follow input order.
    """

    def __init__(
        self,
        cache: ExpansionCache | None = None,
        retries: int = DEFAULT_RETRIES,
        backoff_base: float = DEFAULT_BACKOFF_BASE,
        concurrency: int = DEFAULT_CONCURRENCY,
        prompt_template: str = DEFAULT_PROMPT_TEMPLATE,
        sleep=time.sleep,
        backend_factory=resolve_backend,
    ):
        if retries < 1:
            raise ValueError("retries must be >= 1")
        if concurrency < 1:
            raise ValueError("concurrency must be >= 1")
        self.cache = cache if cache is not None else ExpansionCache()
        self.retries = retries
        self.backoff_base = backoff_base
        self.concurrency = concurrency
        self.prompt_template = prompt_template
        self._sleep = sleep
        self._backend_factory = backend_factory
        self._backends: dict[str, object] = {}
        self._backend_lock = threading.Lock()

    @property
    def network_requests(self) -> int:
        """Total backend calls issued through this expander (mock included)."""
        return sum(b.requests for b in self._backends.values())

    def _backend(self, descriptor: str):
        with self._backend_lock:
            if descriptor not in self._backends:
                self._backends[descriptor] = self._backend_factory(descriptor)
            return self._backends[descriptor]

    def _complete_with_retries(self, backend, prompt, max_new_tokens, seed) -> str:
        last_error = None
        for attempt in range(1, self.retries + 1):
            try:
                return backend.complete(prompt, max_new_tokens, seed)
            except TransientBackendError as exc:
                last_error = exc
                if attempt < self.retries:
                    self._sleep(self.backoff_base * 2 ** (attempt - 1))
        raise BackendUnavailable(
            f"backend {backend.name} failed after {self.retries} attempts: {last_error}"
        ) from last_error

    def expand_caption(self, req: ExpansionRequest) -> ExpansionResult:
        """Expand one caption; a warm cache answers without any backend call."""
        backend = self._backend(req.backend)
        key = (backend.name, req.caption, req.max_new_tokens, req.seed)
        cached = self.cache.get(key)
        if cached is not None:
            return ExpansionResult(
                original=req.caption,
                expanded=cached,
                backend_name=backend.name,
                cached=True,
            )
        prompt = self.prompt_template.format(caption=req.caption)
        continuation = self._complete_with_retries(
            backend, prompt, req.max_new_tokens, req.seed
        )
        if not continuation.strip():
            raise EmptyResponse(f"backend {backend.name} returned no text")
        continuation = truncate_words(continuation, req.max_new_tokens)
        # put() hands back the stored value, so racing threads agree with the cache
        expanded = self.cache.put(key, req.caption + continuation)
        return ExpansionResult(
            original=req.caption,
            expanded=expanded,
            backend_name=backend.name,
            cached=False,
        )

    def expand_many(self, reqs: list[ExpansionRequest]) -> list[ExpansionResult]:
        """Expand a batch; output order follows input order regardless of timing."""
        if not reqs:
            return []
        if self.concurrency == 1 or len(reqs) == 1:
            return [self.expand_caption(r) for r in reqs]
        workers = min(self.concurrency, len(reqs))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(self.expand_caption, r) for r in reqs]
            results, first_error = [], None
            for future in futures:
                try:
                    results.append(future.result())
                except Exception as exc:  # noqa: BLE001 - re-raised below
                    if first_error is None:
                        first_error = exc
            if first_error is not None:
                raise first_error
        return results


def expansion_token_count(original: str, expanded: str) -> int:
    """Number of tokens the expansion added beyond the original caption."""
    if not expanded.startswith(original):
        raise ValueError("expanded text does not begin with the original caption")
    return len(split_words(expanded[len(original) :]))
