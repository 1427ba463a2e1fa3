import os
import uuid

import pytest

from stagedio import faults


@pytest.fixture(autouse=True)
def _disarm_faults():
    yield
    faults.disarm()


@pytest.fixture
def cache(tmp_path):
    d = tmp_path / "cache"
    (d / "ready").mkdir(parents=True)
    return d


@pytest.fixture(scope="session")
def s3_endpoint():
    """A local S3-compatible emulator for the whole session."""
    moto_server = pytest.importorskip("moto.server")
    for k, v in (("AWS_ACCESS_KEY_ID", "testing"), ("AWS_SECRET_ACCESS_KEY", "testing"),
                 ("AWS_DEFAULT_REGION", "us-east-1")):
        os.environ.setdefault(k, v)
    server = moto_server.ThreadedMotoServer(ip_address="127.0.0.1", port=0, verbose=False)
    server.start()
    host, port = server.get_host_and_port()
    yield f"http://{host}:{port}"
    server.stop()


@pytest.fixture
def s3_bucket(s3_endpoint):
    import boto3

    name = f"bkt-{uuid.uuid4().hex[:12]}"
    boto3.client("s3", endpoint_url=s3_endpoint).create_bucket(Bucket=name)
    return f"{s3_endpoint}/{name}"
