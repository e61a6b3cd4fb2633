"""DSR-style route caches and on-demand route discovery."""
import logging
from collections import deque
from typing import Dict, List, Optional, Sequence, Set, Tuple

from app.netsim.topology import Topology

logger = logging.getLogger(__name__)

Path = List[int]
RequestKey = Tuple[int, int]


class RouteCache:
    """Source routes known at one node, keyed by destination."""

    def __init__(self, owner: int, max_routes: int = 3):
        self.owner = owner
        self.max_routes = max_routes
        self.routes: Dict[int, List[Path]] = {}

    def add(self, path: Sequence[int]):
        """Cache path (which must start at the owner) and every prefix of it."""
        path = list(path)
        if not path or path[0] != self.owner:
            raise ValueError(f"Route {path} does not start at node {self.owner}")
        for end in range(2, len(path) + 1):
            prefix = path[:end]
            known = self.routes.setdefault(prefix[-1], [])
            if prefix in known:
                continue
            known.append(prefix)
            known.sort(key=len)
            del known[self.max_routes:]

    def lookup(self, destination: int) -> Optional[Path]:
        known = self.routes.get(destination)
        return list(known[0]) if known else None

    def alternatives(self, destination: int) -> List[Path]:
        return [list(p) for p in self.routes.get(destination, [])]

    def remove_link(self, a: int, b: int) -> int:
        """Evict every route using the link a-b in either direction."""
        purged = 0
        for destination in list(self.routes):
            kept = [p for p in self.routes[destination] if not uses_link(p, a, b)]
            purged += len(self.routes[destination]) - len(kept)
            if kept:
                self.routes[destination] = kept
            else:
                del self.routes[destination]
        return purged

    def __contains__(self, destination: int) -> bool:
        return destination in self.routes


def uses_link(path: Sequence[int], a: int, b: int) -> bool:
    return any({path[i], path[i + 1]} == {a, b} for i in range(len(path) - 1))


def install_route(caches: Dict[int, RouteCache], path: Sequence[int], max_routes: int = 3):
    """Install a discovered route at every node it traverses, in both directions."""
    path = list(path)
    for i, node in enumerate(path):
        cache = caches.setdefault(node, RouteCache(node, max_routes))
        if i < len(path) - 1:
            cache.add(path[i:])
        if i > 0:
            cache.add(list(reversed(path[: i + 1])))


REPLY = "reply"
FORWARD = "forward"
DISCARD = "discard"


class RouteDiscovery:
    """RREQ duplicate suppression, RREP installation and RERR purging over a set of caches.

    The simulator drives it frame by frame; dsr_route drives it as an
    instantaneous lossless flood. Both see the same rules.
    """

    def __init__(self, caches: Dict[int, RouteCache], max_replies: int = 3, max_hops: int = 64):
        self.caches = caches
        self.max_replies = max_replies
        self.max_hops = max_hops
        self.seen: Dict[int, Set[RequestKey]] = {}
        self.replies: Dict[RequestKey, int] = {}
        self._request_ids = 0

    def cache(self, node: int) -> RouteCache:
        return self.caches.setdefault(node, RouteCache(node, self.max_replies))

    def lookup(self, source: int, destination: int) -> Optional[Path]:
        return self.cache(source).lookup(destination)

    def new_request(self, source: int) -> RequestKey:
        self._request_ids += 1
        key = (source, self._request_ids)
        self.seen.setdefault(source, set()).add(key)
        return key

    def on_request(self, node: int, key: RequestKey, route: Sequence[int], destination: int) -> str:
        """What node does with a copy of request key that travelled route (ending at node)."""
        seen = self.seen.setdefault(node, set())
        if node == destination:
            replies = self.replies.get(key, 0)
            if replies >= self.max_replies:
                return DISCARD
            self.replies[key] = replies + 1
            seen.add(key)
            return REPLY
        if key in seen or len(route) > self.max_hops:
            return DISCARD
        seen.add(key)
        return FORWARD

    def on_reply(self, discovered: Sequence[int]):
        install_route(self.caches, discovered, self.max_replies)
        logger.debug("Route %d->%d installed: %s", discovered[0], discovered[-1], list(discovered))

    def on_error(self, node: int, a: int, b: int) -> int:
        return self.cache(node).remove_link(a, b)


def dsr_route(
    topology: Topology,
    source: int,
    destination: int,
    caches: Dict[int, RouteCache],
    discovery: Optional[RouteDiscovery] = None,
) -> Optional[Path]:
    """Resolve a route: cache hit, else a lossless RREQ flood answered by the first copy to arrive.

    The flood is explored in broadcast order with the same duplicate
    suppression the simulator applies; the reply installs the route at every
    traversed node. Returns None when the destination is unreachable.
    """
    discovery = discovery or RouteDiscovery(caches)
    cached = discovery.lookup(source, destination)
    if cached is not None:
        return cached
    key = discovery.new_request(source)
    frontier: deque = deque([[source]])
    while frontier:
        route = frontier.popleft()
        for neighbor in sorted(topology.neighbors(route[-1])):
            extended = route + [neighbor]
            action = discovery.on_request(neighbor, key, extended, destination)
            if action == REPLY:
                discovery.on_reply(extended)
                return extended
            if action == FORWARD:
                frontier.append(extended)
    logger.debug("No route from %d to %d", source, destination)
    return None


def reverse_prefix(route: Sequence[int], position: int) -> Tuple[int, ...]:
    """Route from route[position] back to route[0]."""
    return tuple(reversed(route[: position + 1]))
