"""s3-style object storage mapped onto a local directory tree.

An ``s3://bucket/prefix/`` URL resolves to ``<root>/bucket/prefix/``.  The
scheme string is kept verbatim so command lines written for real S3 work
unchanged.
"""

import os
import shutil
import threading
from dataclasses import dataclass
from pathlib import Path

from .errors import BadScheme, EmptyBucket, IoFailure, UnknownCorpus

OBJECT_ROOT_ENV = "OBJECT_ROOT"


@dataclass(frozen=True)
class StorageUrl:
    scheme: str
    bucket: str
    key_prefix: str = ""

    def __str__(self):
        return self.render()

    def render(self):
        if self.key_prefix:
            return f"{self.scheme}://{self.bucket}/{self.key_prefix}"
        return f"{self.scheme}://{self.bucket}"


def parse_storage_url(text):
    scheme, sep, rest = text.partition("://")
    if not sep or scheme != "s3":
        raise BadScheme(f"expected s3:// url, got {text!r}")
    bucket, _, prefix = rest.partition("/")
    if not bucket:
        raise EmptyBucket(f"no bucket in {text!r}")
    return StorageUrl("s3", bucket, prefix)


@dataclass(frozen=True)
class ObjectHandle:
    url: str
    path: Path

    def read_bytes(self):
        return self.path.read_bytes()


class ObjectStore:
    """Local object root.  Same-key writers are serialized; distinct keys are not."""

    def __init__(self, root, audit=None):
        self.root = Path(root)
        self.audit = audit
        self._locks = {}
        self._guard = threading.Lock()

    @classmethod
    def from_env(cls, default="objects", audit=None):
        return cls(os.environ.get(OBJECT_ROOT_ENV, default), audit=audit)

    def object_path(self, url, name):
        if isinstance(url, str):
            url = parse_storage_url(url)
        return self.root / url.bucket / (url.key_prefix + name)

    def _lock_for(self, path):
        with self._guard:
            return self._locks.setdefault(path, threading.Lock())

    def upload(self, local_path, url, name, tracking_id="-"):
        if isinstance(url, str):
            url = parse_storage_url(url)
        dest = self.object_path(url, name)
        with self._lock_for(dest):
            existed = dest.exists()
            try:
                dest.parent.mkdir(parents=True, exist_ok=True)
                tmp = dest.with_name(dest.name + ".part")
                shutil.copyfile(local_path, tmp)
                os.replace(tmp, dest)
            except OSError as e:
                raise IoFailure(f"upload of {local_path} to {url}{name} failed: {e}") from e
        if self.audit is not None:
            self.audit.record(tracking_id, f"object:{url.render()}{name}",
                              "overwrite" if existed else "upload")
        return ObjectHandle(url.render() + name, dest)

    def download(self, url, name):
        if isinstance(url, str):
            url = parse_storage_url(url)
        path = self.object_path(url, name)
        try:
            return path.read_bytes()
        except OSError as e:
            raise IoFailure(str(e)) from e


def fetch_source(label, corpus_root):
    """List the WAV files of corpus ``label``, sorted lexicographically."""
    d = Path(corpus_root) / label
    if not d.is_dir():
        raise UnknownCorpus(label)
    return sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() == ".wav")
