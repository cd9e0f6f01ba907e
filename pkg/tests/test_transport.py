import os
import pickle
import shutil
import subprocess
import sys
import textwrap
import time

import numpy as np
import pytest

from potm.transport import (InProcessHub, SerialTransport, TransportError, WorkerError,
                            run_workers)


def test_serial_transport_collectives():
    t = SerialTransport()
    assert (t.rank, t.world_size) == (0, 1)
    assert t.all_gather(5) == [5] and t.gather(5) == [5] and t.bcast(5) == 5
    with pytest.raises(TransportError):
        t.send(1, b"x")


def test_pairwise_fifo_exactly_once():
    def worker(tr):
        for k in range(20):
            for d in range(tr.world_size):
                if d != tr.rank:
                    tr.send(d, f"{tr.rank}:{k}".encode())
        got = {s: [tr.recv(s).decode() for _ in range(20)]
               for s in range(tr.world_size) if s != tr.rank}
        tr.barrier()
        return got

    for rank, got in enumerate(run_workers(worker, 4)):
        for s, msgs in got.items():
            assert msgs == [f"{s}:{k}" for k in range(20)]


def test_gather_and_bcast():
    def worker(tr):
        return tr.gather(tr.rank * 10, root=2), tr.bcast("x" if tr.rank == 1 else None, root=1)

    out = run_workers(worker, 3)
    assert out[2][0] == [0, 10, 20] and out[0][0] is None
    assert all(b == "x" for _, b in out)


def test_failure_propagates_without_hanging():
    def worker(tr):
        if tr.rank == 1:
            raise ValueError("boom")
        tr.recv(1)

    t0 = time.perf_counter()
    with pytest.raises(WorkerError) as info:
        run_workers(worker, 3, timeout=60)
    assert info.value.rank == 1 and isinstance(info.value.original, ValueError)
    assert time.perf_counter() - t0 < 10


def test_recv_timeout():
    hub = InProcessHub(2, timeout=0.2)
    with pytest.raises(TransportError, match="timed out"):
        hub.transport(0).recv(1)


def test_invalid_peer():
    hub = InProcessHub(2)
    with pytest.raises(TransportError):
        hub.transport(0).send(0, b"")
    with pytest.raises(ValueError):
        hub.transport(2)


MPI_SCRIPT = textwrap.dedent("""
    import pickle, sys
    import numpy as np
    from potm.driver.deck import ProblemDeck
    from potm.driver.run import run
    deck = ProblemDeck(**pickle.loads(bytes.fromhex(sys.argv[1])))
    rep = run(deck)
    if rep is not None:
        with open(sys.argv[2], "wb") as fh:
            pickle.dump((rep.nodes, rep.mps), fh)
""")


@pytest.mark.slow
@pytest.mark.skipif(shutil.which("mpirun") is None, reason="mpirun not available")
def test_cluster_backend_matches_inprocess(tmp_path):
    pytest.importorskip("mpi4py")
    from potm.driver.deck import ProblemDeck
    from potm.driver.run import run

    kw = dict(generator="jittered_box(shape=(3, 3, 4), lengths=(1e-2, 1e-2, 1.3e-2))",
              material="j2",
              material_params=dict(E=70e9, nu=0.3, H=1e8, sigma_y0=2e8, rho0=2700.0),
              dt=1e-7, n_steps=8, wall_point=np.zeros(3), wall_normal=np.array([0, 0, 1.0]),
              initial_velocity=np.array([0, 0, -50.0]), out=str(tmp_path))
    ref = run(ProblemDeck(**kw), workers=1)
    script = tmp_path / "mpi_run.py"
    script.write_text(MPI_SCRIPT)
    out = tmp_path / "final.pkl"
    env = dict(os.environ, OMPI_ALLOW_RUN_AS_ROOT="1", OMPI_ALLOW_RUN_AS_ROOT_CONFIRM="1",
               OMPI_MCA_rmaps_base_oversubscribe="1")
    payload = pickle.dumps(dict(kw, backend="cluster")).hex()
    proc = subprocess.run(["mpirun", "-n", "2", sys.executable, str(script), payload, str(out)],
                          env=env, capture_output=True, text=True, timeout=600)
    assert proc.returncode == 0, proc.stderr[-2000:]
    with open(out, "rb") as fh:
        nodes, mps = pickle.load(fh)
    assert nodes.bitwise_equal(ref.nodes) and mps.bitwise_equal(ref.mps)
