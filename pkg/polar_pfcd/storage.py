import os
from typing import Dict, Optional

import fsspec
from adlfs import AzureBlobFileSystem
from fsspec.core import split_protocol
from fsspec.implementations.local import LocalFileSystem
from s3fs import S3FileSystem

from polar_pfcd.meta_types.run import ABFS_PROTOCOL, FILE_PROTOCOL, S3_PROTOCOL, Endpoint


class UnsupportedStorageProtocol(Exception):
    pass


def configure_filesystem(endpoint: Endpoint, secrets: Dict) -> fsspec.AbstractFileSystem:
    """
    Build the fsspec filesystem for a storage endpoint.

    Credentials are looked up in ``secrets`` under the names given by the
    endpoint's storage options, so configuration files never carry keys.
    """
    if endpoint.protocol == FILE_PROTOCOL:
        return LocalFileSystem(auto_mkdir=True)
    elif endpoint.protocol == S3_PROTOCOL:
        if endpoint.storage_options:
            return S3FileSystem(
                anon=False,
                default_cache_type="none",
                default_fill_cache=False,
                key=secrets[endpoint.storage_options.key],
                secret=secrets[endpoint.storage_options.secret],
            )
        return S3FileSystem(anon=True)
    elif endpoint.protocol == ABFS_PROTOCOL:
        if endpoint.storage_options is None:
            raise UnsupportedStorageProtocol("abfs endpoints need a connection string secret")
        return AzureBlobFileSystem(connection_string=secrets[endpoint.storage_options.secret])
    else:
        raise UnsupportedStorageProtocol(endpoint.protocol)


def filesystem_for_path(
    path: str, endpoint: Optional[Endpoint] = None, secrets: Optional[Dict] = None
) -> fsspec.AbstractFileSystem:
    protocol, _ = split_protocol(path)
    protocol = protocol or FILE_PROTOCOL
    if endpoint is None or endpoint.protocol != protocol:
        endpoint = Endpoint(protocol=protocol)
    return configure_filesystem(endpoint, dict(os.environ) if secrets is None else secrets)
