import asyncio
import json
import logging
import os
from contextlib import asynccontextmanager
from typing import AsyncIterator, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import httpx
import numpy as np

from ragforget.backbone import BackboneKind, BackboneModel, CandidateList
from ragforget.corpus import CategoryMap, Dataset, Interaction
from ragforget.retrieval import FilteredHistory

log = logging.getLogger(__name__)

ML100K_ENV = "RAGFORGET_ML100K"

Row = Union[Tuple[int, int], Tuple[int, int, int], Tuple[int, int, int, int]]


def dataset(*rows: Row) -> Dataset:
    """
    :param rows: (user, item[, rating[, timestamp]]); rating defaults to 4, timestamp to the row position
    """
    interactions = []
    for position, row in enumerate(rows):
        user, item = row[0], row[1]
        rating = row[2] if len(row) > 2 else 4  # type: ignore
        timestamp = row[3] if len(row) > 3 else position  # type: ignore
        interactions.append(Interaction(user, item, rating, timestamp))
    return Dataset(interactions)


def history(user_id: int, items: Sequence[int], rating: int = 4) -> FilteredHistory:
    """:return: unfiltered history of the given items, timestamps following list order"""
    return FilteredHistory(user_id, tuple(Interaction(user_id, item, rating, t) for t, item in enumerate(items)))


def categories(mapping: Mapping[int, Iterable[str]]) -> CategoryMap:
    return CategoryMap.from_items(mapping)


def embedding_model(users: Mapping[int, Sequence[float]], items: Mapping[int, Sequence[float]],
                    kind: BackboneKind = BackboneKind.BPR) -> BackboneModel:
    """:return: backbone with hand-picked embeddings, ids in mapping order"""
    return BackboneModel(kind, np.array(list(users.values()), dtype=np.float64),
                         np.array(list(items.values()), dtype=np.float64), list(users), list(items))


def candidate_list(user_id: int, items: Sequence[int], scores: Optional[Sequence[float]] = None) -> CandidateList:
    """:return: candidates with strictly decreasing backbone scores unless given"""
    if scores is None:
        scores = [float(len(items) - position) for position in range(len(items))]
    return CandidateList(user_id, tuple(items), tuple(scores))


def write_lines(path: str, lines: Iterable[str], encoding: str = "utf-8") -> str:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding=encoding, newline="\n") as out:
        for line in lines:
            out.write(line + "\n")
    return path


def two_cluster_dataset(users_per_cluster: int = 10, items_per_cluster: int = 10, per_user: int = 6,
                        seed: int = 0) -> Dataset:
    """
    Users 1..n like items 1..m only, users n+1..2n like items m+1..2m only; each user rates `per_user`
    items of their cluster drawn by a seeded generator
    """
    rng = np.random.default_rng(seed)
    rows: List[Row] = []
    for cluster in range(2):
        items = np.arange(1, items_per_cluster + 1) + cluster * items_per_cluster
        for offset in range(users_per_cluster):
            user = 1 + offset + cluster * users_per_cluster
            for item in rng.choice(items, size=per_user, replace=False):
                rows.append((user, int(item), 5, len(rows)))
    return dataset(*rows)


def chat_envelope(content: str) -> Dict[str, object]:
    """:return: minimal chat-completions response body carrying `content`"""
    return {
        "id": "chatcmpl-test",
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}],
    }


class ChatStub:
    """
    Local stand-in for an OpenAI-compatible server: answers requests from a queue of replies (a string is
    returned as message content, an integer as a bare HTTP status) and captures every request
    """

    def __init__(self, replies: Sequence[Union[str, int]]) -> None:
        self._replies = list(replies)
        self.requests: List[httpx.Request] = []

    def handler(self, request: httpx.Request) -> httpx.Response:
        self.requests.append(request)
        reply = self._replies.pop(0) if len(self._replies) > 1 else self._replies[0]
        if isinstance(reply, int):
            return httpx.Response(reply)
        return httpx.Response(200, json=chat_envelope(reply))

    @property
    def bodies(self) -> List[Dict[str, object]]:
        return [json.loads(request.content) for request in self.requests]

    def client(self) -> httpx.AsyncClient:
        return httpx.AsyncClient(transport=httpx.MockTransport(self.handler))


@asynccontextmanager
async def slow_chat_server(delay: float, content: str) -> AsyncIterator[str]:
    """
    Real HTTP server on a loopback port that waits `delay` seconds before answering every request with `content`

    :return: base URL of the server
    """
    async def handle(reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        head = await reader.readuntil(b"\r\n\r\n")
        length = 0
        for line in head.decode("latin-1").split("\r\n"):
            name, _, value = line.partition(":")
            if name.strip().lower() == "content-length":
                length = int(value.strip())
        await reader.readexactly(length)
        await asyncio.sleep(delay)
        body = json.dumps(chat_envelope(content)).encode("utf-8")
        try:
            writer.write(b"HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nConnection: close\r\n"
                         + f"Content-Length: {len(body)}\r\n\r\n".encode("ascii") + body)
            await writer.drain()
        except ConnectionError:
            pass  # client gave up
        finally:
            writer.close()

    server = await asyncio.start_server(handle, "127.0.0.1", 0)
    port = server.sockets[0].getsockname()[1]
    try:
        yield f"http://127.0.0.1:{port}"
    finally:
        server.close()
        await server.wait_closed()
