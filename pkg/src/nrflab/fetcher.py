"""Dataset archive download and unpacking."""

import asyncio
import logging
import tarfile
from enum import StrEnum
from os import utime
from pathlib import Path

import httpx

from nrflab.utils import format_bytes, parse_http_date

logger = logging.getLogger(__name__)

DATASET_URLS: dict[str, list[str]] = {
    "cifar10": ["https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz"],
    "cifar100": ["https://www.cs.toronto.edu/~kriz/cifar-100-binary.tar.gz"],
    "mnist": [
        f"https://storage.googleapis.com/cvdf-datasets/mnist/{name}.gz"
        for name in (
            "train-images-idx3-ubyte",
            "train-labels-idx1-ubyte",
            "t10k-images-idx3-ubyte",
            "t10k-labels-idx1-ubyte",
        )
    ],
}


class SkipMode(StrEnum):
    """When a dataset file already on disk is reused instead of downloaded again."""

    FAST = "fast"  # any local copy is good enough
    CHECK = "check"  # reuse it unless the server reports a newer or differently sized file
    NONE = "none"  # always download


async def _is_current(client: httpx.AsyncClient, url: str, path: Path) -> bool:
    """Whether the local copy of a dataset file matches what the server advertises."""
    try:
        response = await client.head(url)
        response.raise_for_status()
    except httpx.HTTPError as e:
        logger.warning(f"cannot check {path.name} against {url}, downloading again: {e}")
        return False
    local = path.stat()
    if remote_mtime := parse_http_date(response.headers.get("last-modified")):
        # a second of slack for filesystem timestamp granularity
        return remote_mtime.timestamp() <= local.st_mtime + 1
    if remote_size := response.headers.get("content-length"):
        return int(remote_size) == local.st_size
    return False


async def download_file(
    client: httpx.AsyncClient,
    url: str,
    output_path: Path,
    skip_mode: SkipMode = SkipMode.CHECK,
) -> bool:
    """Fetch one dataset file, streaming it to ``output_path`` through a ``.part`` file.

    The local file takes the server's ``Last-Modified`` time so later ``CHECK`` runs can compare
    against it. A partial download never replaces an existing file.

    Returns:
        True when the file is on disk afterwards, False when the download failed.
    """
    if output_path.is_file() and skip_mode != SkipMode.NONE:
        if skip_mode == SkipMode.FAST or await _is_current(client, url, output_path):
            logger.debug(f"using existing {output_path}")
            return True

    partial = output_path.with_name(output_path.name + ".part")
    output_path.parent.mkdir(parents=True, exist_ok=True)
    try:
        async with client.stream("GET", url) as response:
            response.raise_for_status()
            received = 0
            with partial.open("wb") as f:
                async for chunk in response.aiter_bytes():
                    f.write(chunk)
                    received += len(chunk)
            last_modified = parse_http_date(response.headers.get("last-modified"))
    except (httpx.HTTPError, OSError) as e:
        logger.warning(f"failed to download {url}: {e}")
        partial.unlink(missing_ok=True)
        return False

    partial.replace(output_path)
    if last_modified is not None:
        utime(output_path, (last_modified.timestamp(), last_modified.timestamp()))
    logger.info(f"downloaded {output_path.name} ({format_bytes(received)})")
    return True


def unpack_archive(archive: Path, target: Path) -> None:
    """Extract a .tar.gz dataset archive next to where it was downloaded."""
    with tarfile.open(archive, "r:gz") as tar:
        tar.extractall(target, filter="data")
    logger.info(f"Unpacked {archive.name} into {target}")


async def fetch_dataset(name: str, directory: Path, skip_mode: SkipMode = SkipMode.CHECK) -> list[Path]:
    """Download (and unpack, for tarballs) the files of a dataset into ``directory``.

    Returns the local paths of the downloaded files.

    Raises:
        ValueError: unknown dataset name.
        RuntimeError: some file could not be downloaded.
    """
    if name not in DATASET_URLS:
        raise ValueError(f"no download source for dataset {name!r}; known: {', '.join(DATASET_URLS)}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    urls = DATASET_URLS[name]
    paths = [directory / url.rsplit("/", 1)[-1] for url in urls]

    async with httpx.AsyncClient(follow_redirects=True, timeout=120.0) as client:
        results = await asyncio.gather(
            *(download_file(client, url, path, skip_mode) for url, path in zip(urls, paths))
        )
    failed = [url for url, ok in zip(urls, results) if not ok]
    if failed:
        raise RuntimeError(f"failed to download: {', '.join(failed)}")

    for path in paths:
        if path.name.endswith(".tar.gz"):
            unpack_archive(path, directory)
    return paths
