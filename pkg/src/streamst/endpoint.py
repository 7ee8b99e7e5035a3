"""Transcript translation through a generic chat-completion endpoint.

Request body (POST ``{base_url}/chat/completions``)::

    {"model": str, "messages": [{"role": "user", "content": str}], "temperature": 0}

Expected response::

    {"choices": [{"message": {"role": "assistant", "content": str}}]}

``STREAMST_ENDPOINT_URL`` and ``STREAMST_ENDPOINT_KEY`` supply the base URL
and bearer key when they are not passed explicitly.
"""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import httpx

log = logging.getLogger(__name__)

PROMPT_TEMPLATE = (
    "<|im_start|>system\n"
    "You are a professional translator. \n"
    "<|im_end|>\n"
    "<|im_start|>user\n"
    "Given an English sentence along with its\n"
    "preceding sentences, translate the given \n"
    "sentence into {language}. Do not include any \n"
    "other text.\n"
    "\n"
    "|Preceding Sentences|\n"
    "{preceding}\n"
    "|End of Preceding Sentences|\n"
    "\n"
    "|Sentence to Translate|\n"
    "{sentence}\n"
    "|End of Sentence to Translate|\n"
    "<|im_end|>\n"
    "<|im_start|>assistant\n"
)


def render_translation_prompt(sentence: str, preceding: Sequence[str] = (), target_language: str = "Chinese") -> str:
    """Fill the translation prompt; at most the last three preceding sentences are used."""
    if not sentence:
        raise ValueError("sentence must be non-empty")
    context = list(preceding)[-3:]
    return PROMPT_TEMPLATE.format(language=target_language, preceding="\n".join(context), sentence=sentence)


class EndpointError(RuntimeError):
    pass


@dataclass
class ChatClient:
    base_url: str
    api_key: str | None = None
    model: str = "translator"
    max_retries: int = 3
    backoff_s: float = 0.5
    max_in_flight: int = 4
    timeout_s: float = 60.0
    transport: httpx.BaseTransport | None = None

    @classmethod
    def from_env(cls, **kwargs) -> "ChatClient":
        url = os.environ.get("STREAMST_ENDPOINT_URL")
        if not url:
            raise EndpointError("STREAMST_ENDPOINT_URL is not set")
        return cls(base_url=url, api_key=os.environ.get("STREAMST_ENDPOINT_KEY"), **kwargs)

    def _client(self) -> httpx.Client:
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        return httpx.Client(base_url=self.base_url, headers=headers, timeout=self.timeout_s, transport=self.transport)

    def complete(self, prompt: str, client: httpx.Client | None = None) -> str:
        body = {"model": self.model, "messages": [{"role": "user", "content": prompt}], "temperature": 0}
        own = client is None
        client = client or self._client()
        try:
            for attempt in range(self.max_retries + 1):
                try:
                    resp = client.post("/chat/completions", json=body)
                    if resp.status_code >= 500 or resp.status_code == 429:
                        raise httpx.HTTPStatusError("retryable", request=resp.request, response=resp)
                    resp.raise_for_status()
                    return resp.json()["choices"][0]["message"]["content"].strip()
                except (httpx.TransportError, httpx.HTTPStatusError) as exc:
                    retryable = not isinstance(exc, httpx.HTTPStatusError) or exc.response.status_code >= 429
                    if attempt == self.max_retries or not retryable:
                        raise EndpointError(f"chat request failed: {exc}") from exc
                    log.warning("chat request failed (%s), retry %d", exc, attempt + 1)
                    time.sleep(self.backoff_s * 2**attempt)
        finally:
            if own:
                client.close()
        raise EndpointError("unreachable")

    def translate_many(self, prompts: Sequence[str]) -> list[str]:
        """Translate in order, with at most ``max_in_flight`` concurrent requests."""
        with self._client() as client, ThreadPoolExecutor(max_workers=self.max_in_flight) as pool:
            return list(pool.map(lambda p: self.complete(p, client), prompts))


def mock_transport(translate: Callable[[str], str]) -> httpx.MockTransport:
    """In-process endpoint answering with ``translate(sentence)`` for the prompt's sentence slot."""
    def handler(request: httpx.Request) -> httpx.Response:
        body = json.loads(request.content)
        prompt = body["messages"][-1]["content"]
        sentence = prompt.split("|Sentence to Translate|\n", 1)[1].split("\n|End of Sentence to Translate|", 1)[0]
        return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": translate(sentence)}}]})

    return httpx.MockTransport(handler)
