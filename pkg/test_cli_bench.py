"""
cli_bench / run のテスト（サブコマンドとλスイープ）
"""
import tempfile

import numpy as np
import pytest

import run
from cli_bench import (CSV_HEADER, EXIT_CONFIG, EXIT_FAILURE, EXIT_OK, STATUS_ERROR, STATUS_OK, cmd_generate,
                       cmd_run, cmd_sweep, cmd_verify, load_sweep_spec, read_sweep_csv, run_sweep)
from conftest import SAMPLE_RDF, write_config
from dataset import (Dataset, EmployeeRecord, PartitionSpec, expected_vector, generate_synthetic, load_csv,
                     partition_vertical, save_csv)
from first_stage import first_stage_predict
from gradient_engine import DEFAULT_ETA_B, DEFAULT_ETA_S, oracle_iterations_batch, oracle_iterations_stochastic
from ontology_rdf import DisguisePolicy, OntologyModel, generate_rdf

AF = [270.0, 400.0]
BF = [350.0, 400.0]
E = [200.0, 380.0]

# 同じセルを3回実行した最短時間どうしを比べる。セッションの固定費（RDFの生成やスレッドの起動）が
# 時間の大半を占めるので、隣り合うλの間では半分までの短縮と 5ms のゆらぎを許す。
TIMING_RATIO = 0.5
TIMING_ALLOWANCE_MS = 5.0


@pytest.fixture(autouse=True)
def log_file(tmp_path, monkeypatch):
    monkeypatch.setenv("PPGD_LOG_FILE", str(tmp_path / "ppgd.log"))


def _t2_sweep(tmp_path, t2_csv, **values):
    defaults = {"DATASET": t2_csv.name, "PARTY_A_ATTRS": "Basic,HRA", "PARTY_B_ATTRS": "PF,GDP",
                "SHARED_KEY": "secret12"}
    defaults.update(values)
    return write_config(tmp_path / "sweep.env", **defaults)


def test_run_t2(t2_config, capsys):
    assert cmd_run(t2_config) == EXIT_OK
    out = capsys.readouterr().out
    expected = oracle_iterations_stochastic(AF, BF, E, DEFAULT_ETA_S, 1.0)
    assert f"反復回数: {expected}" in out
    assert (t2_config.parent / "rdf" / "RDF_A.rdf").exists()


def test_run_socket_transport(t2_config, capsys):
    assert cmd_run(t2_config, transport="socket") == EXIT_OK
    expected = oracle_iterations_stochastic(AF, BF, E, DEFAULT_ETA_S, 1.0)
    assert f"反復回数: {expected}" in capsys.readouterr().out


def test_run_rejects_zero_lambda(tmp_path, t2_csv, capsys):
    path = write_config(tmp_path / "bad.env", DATASET=t2_csv.name, LAMBDA="0")
    assert cmd_run(path) == EXIT_CONFIG
    assert "LAMBDA" in capsys.readouterr().out


def test_run_missing_dataset(tmp_path, capsys):
    path = write_config(tmp_path / "missing.env", DATASET="nope.csv")
    assert cmd_run(path) != EXIT_OK
    assert "nope.csv" in capsys.readouterr().out


def test_run_non_convergence_is_a_failure(tmp_path, t2_csv):
    path = _t2_sweep(tmp_path, t2_csv, LAMBDA="0.01", MAX_ITERATIONS="3")
    assert cmd_run(path) == EXIT_FAILURE


def test_sweep_synthetic(tmp_path):
    spec = write_config(tmp_path / "sweep.env", SEED="7", N="100", LAMBDAS="0.9,0.7,0.5,0.3,0.1",
                        METHODS="Stochastic,Batch", REPETITIONS="3")
    out = tmp_path / "out" / "sweep.csv"
    assert cmd_sweep(spec, out) == EXIT_OK

    assert out.read_text(encoding="utf-8").splitlines()[0] == ",".join(CSV_HEADER)
    frame = read_sweep_csv(out)
    assert len(frame) == 10
    assert set(frame["status"]) == {STATUS_OK}
    for method, group in frame.groupby("method"):
        assert list(group["lambda"]) == [0.9, 0.7, 0.5, 0.3, 0.1]
        iterations = list(group["iterations"])
        assert iterations == sorted(iterations)
        assert all(ep <= lam for ep, lam in zip(group["final_ep"], group["lambda"]))
        elapsed = list(group["elapsed_ms"])
        assert all(ms >= 0 for ms in elapsed)
        for earlier, later in zip(elapsed, elapsed[1:]):
            assert later >= earlier * TIMING_RATIO - TIMING_ALLOWANCE_MS, (method, elapsed)

    view_a, view_b = partition_vertical(generate_synthetic(7, 100), PartitionSpec.default_split())
    doc_a = generate_rdf(view_a, OntologyModel.for_schema(view_a.attributes), DisguisePolicy(10.0))
    doc_b = generate_rdf(view_b, OntologyModel.for_schema(view_b.attributes), DisguisePolicy(10.0))
    af, bf = first_stage_predict(view_a, doc_b), first_stage_predict(view_b, doc_a)
    e = expected_vector(generate_synthetic(7, 100))
    for method, lam, iterations in zip(frame["method"], frame["lambda"], frame["iterations"]):
        if method == "Batch":
            assert iterations == oracle_iterations_batch(af, bf, e, DEFAULT_ETA_B, lam)
        else:
            assert iterations == oracle_iterations_stochastic(af, bf, e, DEFAULT_ETA_S, lam)

    # λごとに、一括と確率的のどちらが多く反復するかが閉形式と一致する
    by_cell = {(m, lam): it for m, lam, it in zip(frame["method"], frame["lambda"], frame["iterations"])}
    for lam in (0.9, 0.7, 0.5, 0.3, 0.1):
        measured = np.sign(by_cell[("Batch", lam)] - by_cell[("Stochastic", lam)])
        expected = np.sign(oracle_iterations_batch(af, bf, e, DEFAULT_ETA_B, lam)
                           - oracle_iterations_stochastic(af, bf, e, DEFAULT_ETA_S, lam))
        assert measured == expected, lam


def test_sweep_and_verify_leave_no_temp_dirs(tmp_path, t2_csv, monkeypatch):
    root = tmp_path / "tmp"
    root.mkdir()
    monkeypatch.setattr(tempfile, "tempdir", str(root))
    out = tmp_path / "sweep.csv"
    assert cmd_sweep(_t2_sweep(tmp_path, t2_csv, LAMBDAS="1.1,0.9", REPETITIONS="2"), out) == EXIT_OK
    assert list(read_sweep_csv(out)["status"]) == [STATUS_OK] * 4
    assert cmd_sweep(_t2_sweep(tmp_path, t2_csv, LAMBDAS="1.1,0.9", PARALLEL="true"), out) == EXIT_OK
    assert cmd_verify(_t2_sweep(tmp_path, t2_csv, LAMBDA="1.0")) == EXIT_OK
    assert list(root.iterdir()) == []


def test_sweep_matches_oracle(tmp_path, t2_csv):
    spec = load_sweep_spec(_t2_sweep(tmp_path, t2_csv, LAMBDAS="1.2,1.0", METHODS="Batch,Stochastic"))
    rows = run_sweep(spec)
    assert [(r.method, r.lam) for r in rows] == [("Batch", 1.2), ("Batch", 1.0),
                                                ("Stochastic", 1.2), ("Stochastic", 1.0)]
    for r in rows:
        if r.method == "Batch":
            assert r.iterations == oracle_iterations_batch(AF, BF, E, DEFAULT_ETA_B, r.lam)
        else:
            assert r.iterations == oracle_iterations_stochastic(AF, BF, E, DEFAULT_ETA_S, r.lam)


def test_sweep_lambda_above_initial_ep(tmp_path, t2_csv):
    out = tmp_path / "sweep.csv"
    assert cmd_sweep(_t2_sweep(tmp_path, t2_csv, LAMBDAS="1.5", METHODS="Stochastic"), out) == EXIT_OK
    frame = read_sweep_csv(out)
    assert list(frame["iterations"]) == [0]
    assert frame["final_ep"][0] == pytest.approx(1.38883, abs=1e-5)


def test_sweep_repetitions_and_parallel_keep_results(tmp_path, t2_csv):
    single = run_sweep(load_sweep_spec(_t2_sweep(tmp_path, t2_csv, LAMBDAS="1.1,0.9")))
    repeated = run_sweep(load_sweep_spec(_t2_sweep(tmp_path, t2_csv, LAMBDAS="1.1,0.9", REPETITIONS="3")))
    parallel = run_sweep(load_sweep_spec(_t2_sweep(tmp_path, t2_csv, LAMBDAS="1.1,0.9"), parallel=True))
    key = [(r.method, r.lam, r.iterations, r.final_ep) for r in single]
    assert [(r.method, r.lam, r.iterations, r.final_ep) for r in repeated] == key
    assert [(r.method, r.lam, r.iterations, r.final_ep) for r in parallel] == key


def test_sweep_failed_cell_becomes_error_row(tmp_path, t2_csv):
    out = tmp_path / "sweep.csv"
    spec = _t2_sweep(tmp_path, t2_csv, LAMBDAS="1.0,0.01", METHODS="Stochastic", MAX_ITERATIONS="100")
    assert cmd_sweep(spec, out) == EXIT_OK
    frame = read_sweep_csv(out)
    assert list(frame["status"]) == [STATUS_OK, STATUS_ERROR]
    assert frame["iterations"].isna().tolist() == [False, True]


def test_sweep_rejects_unsorted_lambdas(tmp_path, t2_csv):
    spec = _t2_sweep(tmp_path, t2_csv, LAMBDAS="0.5,0.9")
    assert cmd_sweep(spec, tmp_path / "sweep.csv") == EXIT_CONFIG
    assert not (tmp_path / "sweep.csv").exists()


def test_verify_t2(t2_config, capsys):
    assert cmd_verify(t2_config) == EXIT_OK
    out = capsys.readouterr().out
    assert "❌" not in out
    assert "dominance f >= E" in out


def test_verify_extra_rdf(t2_config, tmp_path):
    assert cmd_verify(t2_config) == EXIT_OK
    copy = tmp_path / "copy.rdf"
    copy.write_bytes((t2_config.parent / "rdf" / "RDF_B.rdf").read_bytes())
    assert cmd_verify(t2_config, rdf_path=copy) == EXIT_OK

    corrupted = tmp_path / "corrupted.rdf"
    corrupted.write_bytes(copy.read_bytes()[:-40])
    assert cmd_verify(t2_config, rdf_path=corrupted) == EXIT_FAILURE

    foreign = tmp_path / "foreign.rdf"
    foreign.write_bytes(SAMPLE_RDF)
    assert cmd_verify(t2_config, rdf_path=foreign) == EXIT_FAILURE


def test_verify_single_record_without_disguise(tmp_path, capsys):
    ds = Dataset(("Basic", "HRA", "PF", "GDP"), (
        EmployeeRecord(1, "reva123", "TeamLead", {"Basic": 100.0, "HRA": 50.0, "PF": 30.0, "GDP": 20.0}),))
    save_csv(ds, tmp_path / "one.csv")
    path = write_config(tmp_path / "one.env", DATASET="one.csv", PARTY_A_ATTRS="Basic,HRA",
                        PARTY_B_ATTRS="PF,GDP", DF="0", LAMBDA="1.0")
    assert cmd_verify(path) == EXIT_OK
    out = capsys.readouterr().out
    assert "等号 1 件" in out
    assert "ep0=1" in out


def test_generate(tmp_path):
    out = tmp_path / "syn.csv"
    assert cmd_generate(3, 12, out) == EXIT_OK
    assert load_csv(out) == generate_synthetic(3, 12)
    assert cmd_generate(3, 0, tmp_path / "empty.csv") == EXIT_CONFIG


def test_main_dispatch(t2_config, tmp_path):
    assert run.main(["run", "--config", str(t2_config)]) == EXIT_OK
    assert run.main(["verify", "--config", str(t2_config), "--transport", "socket"]) == EXIT_OK
    assert run.main(["--log-level", "DEBUG", "generate", "--seed", "1", "--n", "5",
                     "--out", str(tmp_path / "g.csv")]) == EXIT_OK
    assert (tmp_path / "ppgd.log").exists()


def test_main_argument_errors(t2_config):
    assert run.main(["run", "--config", str(t2_config), "--listen", "127.0.0.1:0"]) == EXIT_CONFIG
    assert run.main(["run", "--config", str(t2_config), "--role", "alice"]) == EXIT_CONFIG
    with pytest.raises(SystemExit):
        run.main([])
    with pytest.raises(SystemExit):
        run.main(["run", "--config", str(t2_config), "--transport", "pigeon"])
