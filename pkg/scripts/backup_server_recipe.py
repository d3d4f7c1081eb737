#!/usr/bin/env python3
"""Backup-server recipe: a second store receives everything over the router.

The primary stack routes every normalized message (feed/#) to a peer broker;
a backup real-time server ingests the routed stream through the
normalized-passthrough decoder and files it, so the backup's JSONL store
tracks the primary's. Promotion is a manual restart pointing clients at the
backup's monitor; there is no consensus machinery.
"""

import asyncio
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from sensert.broker import Broker  # noqa: E402
from sensert.rts import RealTimeServer  # noqa: E402
from sensert.rts.verticles import FeedHandler, MessageFiler, MessageRouter, RouteRule  # noqa: E402
from sensert.simfleet import DeviceProfile  # noqa: E402
from sensert.stack import Stack, StackConfig  # noqa: E402


async def main() -> None:
    backup_root = Path(tempfile.mkdtemp(prefix="sensert-backup-"))

    # primary stack (brokers + rts) plus a router sharing feed/# with the peer
    peer = Broker(name="peer")
    await peer.start("127.0.0.1", 0)
    primary = Stack(StackConfig())
    await primary.start()
    await primary.rts.deploy(MessageRouter([
        RouteRule(filter="feed/#", remote=f"127.0.0.1:{peer.address[1]}")]))

    # backup server: ingests the routed stream and files it
    backup = RealTimeServer()
    await backup.deploy(FeedHandler(*peer.address))
    await backup.deploy(MessageFiler(backup_root))
    await asyncio.sleep(0.3)

    profiles = [DeviceProfile(f"plug-{i}", "smartplug", period_s=0.2) for i in range(3)]
    log = await primary.run_fleet(profiles, scenario=None, duration_s=3.0)
    await primary.drain()
    await asyncio.sleep(0.5)  # routed tail

    primary_counts = primary.filer_line_counts()
    backup_counts = {
        d.name: sum(1 for f in d.rglob("*.jsonl") for _ in f.open())
        for d in backup_root.iterdir() if d.is_dir()
    }
    print(f"emitted:        {log.counts()}")
    print(f"primary store:  {primary_counts}")
    print(f"backup store:   {backup_counts}")
    print("backup tracks primary:", backup_counts == primary_counts)

    await backup.stop()
    await primary.stop()
    await peer.stop()


if __name__ == "__main__":
    asyncio.run(main())
