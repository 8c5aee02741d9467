import os

import pytest


@pytest.fixture(scope="session", autouse=True)
def cap_threads():
    """Pin worker threads so timing and floating-point behavior are stable."""
    os.environ.setdefault("RADCLS_THREADS", "1")
    import torch

    torch.set_num_threads(int(os.environ["RADCLS_THREADS"]))


@pytest.fixture(scope="session")
def phantom_dataset(tmp_path_factory):
    """A small deterministic phantom dataset shared by pipeline tests."""
    from radcls import phantom

    root = tmp_path_factory.mktemp("phantom")
    spec = phantom.PhantomSpec(n_subjects=8, image_size=96, seed=11)
    manifest = phantom.generate(spec, root)
    return root, manifest
