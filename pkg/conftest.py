"""
テスト共通のフィクスチャ

T2: 2レコード・4属性の小さなコーパス
    r1: Basic=100, HRA=50, PF=30, GDP=20
    r2: Basic=200, HRA=80, PF=60, GDP=40
    両方とも区分 TeamLead、Alice={Basic,HRA}、Bob={PF,GDP}
"""
from pathlib import Path

import pytest

from dataset import Dataset, EmployeeRecord, PartitionSpec, save_csv
from protocol import CipherConfig

T2_SCHEMA = ("Basic", "HRA", "PF", "GDP")

SAMPLE_RDF = b"""<?xml version="1.0" encoding="UTF-8"?>
<rdf:RDF xmlns:j.0="http://www.ppgd.com/"
    xmlns:rdf="http://www.w3.org/1999/02/22-rdf-syntax-ns#">
  <rdf:Description rdf:about="http://www.SkumarSolutions.com/ID10">
    <j.0:hasMinflat>37</j.0:hasMinflat>
    <j.0:hasMinTravel>38</j.0:hasMinTravel>
    <j.0:hasMaxTravel>55</j.0:hasMaxTravel>
    <j.0:hasMinBasic>20</j.0:hasMinBasic>
    <j.0:hasMaxflat>45</j.0:hasMaxflat>
    <j.0:hasMaxBasic>30</j.0:hasMaxBasic>
    <n.0:hasMinHRA>30</j.0:hasMinHRA>
    <j.0:hasMaxHRA>42</j.0:hasMaxHRA>
    <j.0:hasName>reva123</j.0:hasName>
  </rdf:Description>
</rdf:RDF>
"""


def make_t2() -> Dataset:
    return Dataset(T2_SCHEMA, (
        EmployeeRecord(1, "reva123", "TeamLead", {"Basic": 100.0, "HRA": 50.0, "PF": 30.0, "GDP": 20.0}),
        EmployeeRecord(2, "arun456", "TeamLead", {"Basic": 200.0, "HRA": 80.0, "PF": 60.0, "GDP": 40.0}),
    ))


def write_config(path: Path, **values) -> Path:
    """KEY=VALUE 形式の設定ファイルを書く"""
    path.write_text("".join(f"{k}={v}\n" for k, v in values.items()), encoding="utf-8")
    return path


@pytest.fixture
def t2() -> Dataset:
    return make_t2()


@pytest.fixture
def t2_spec() -> PartitionSpec:
    return PartitionSpec.from_names(["Basic", "HRA"], ["PF", "GD"])


@pytest.fixture
def t2_csv(tmp_path) -> Path:
    return save_csv(make_t2(), tmp_path / "t2.csv")


@pytest.fixture
def t2_config(tmp_path, t2_csv) -> Path:
    """T2 を使う設定ファイル（λ=1.0、確率的勾配降下、プロセス内トランスポート）"""
    return write_config(
        tmp_path / "t2.env",
        DATASET=t2_csv.name,
        PARTY_A_ATTRS="Basic,HRA",
        PARTY_B_ATTRS="PF,GDP",
        LAMBDA="1.0",
        METHOD="Stochastic",
        RDF_DIR="rdf",
        SHARED_KEY="secret12",
    )


@pytest.fixture
def cipher() -> CipherConfig:
    return CipherConfig.from_passphrase("secret12")
