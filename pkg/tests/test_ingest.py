import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drstage import ingest
from drstage.errors import (
    DuplicateSampleError,
    ManifestSchemaError,
    ManifestValidationError,
    MissingLabelError,
    PlanError,
    UnknownDomainError,
)
from drstage.ingest import DatasetManifest, Mode, SampleRecord

HEADER = "sample_id,dataset_id,image_path,patient_id,icdr,dme,gradable,age_years,diabetic\n"


def rec(sid, ds="D", **kw):
    return SampleRecord(sample_id=sid, dataset_id=ds, image_path=f"/img/{sid}.png", **kw)


def manifest(ds, n, per_patient=1, start=0):
    return DatasetManifest(
        ds, [rec(f"{ds}-{i}", ds, patient_id=f"{ds}-p{i // per_patient}", icdr=i % 5) for i in range(start, start + n)]
    )


def write(tmp_path, body, name="m.csv"):
    p = tmp_path / name
    p.write_text(body)
    return p


class TestLoadManifest:
    def test_three_rows(self, tmp_path):
        p = write(
            tmp_path,
            HEADER
            + "a,APTOS,a.png,p1,0,0,1,40,1\n"
            + "b,APTOS,b.png,p1,3,,1,,\n"
            + "c,APTOS,c.png,p2,,1,0,70,1\n",
        )
        m = ingest.load_manifest(p)
        assert m.dataset_id == "APTOS"
        assert len(m) == 3
        a, b, c = m.records
        assert (a.icdr, a.dme, a.gradable, a.age_years, a.diabetic) == (0, False, True, 40.0, True)
        assert b.dme is None and b.age_years is None and b.diabetic is None
        assert c.icdr is None and c.gradable is False

    def test_missing_icdr_column(self, tmp_path):
        p = write(tmp_path, HEADER.replace("icdr,", "") + "a,D,a.png,p,0,1,40,1\n")
        with pytest.raises(ManifestSchemaError, match="icdr"):
            ingest.load_manifest(p)

    def test_grade_out_of_range_lists_sample(self, tmp_path):
        p = write(tmp_path, HEADER + "ok,D,a.png,p,1,,1,,\n" + "bad7,D,b.png,q,5,,1,,\n")
        with pytest.raises(ManifestValidationError) as err:
            ingest.load_manifest(p)
        assert "bad7" in err.value.sample_ids
        assert "bad7" in str(err.value)

    def test_duplicate_sample(self, tmp_path):
        p = write(tmp_path, HEADER + "a,D,a.png,p,1,,1,,\n" + "a,D,b.png,q,2,,1,,\n")
        with pytest.raises(DuplicateSampleError):
            ingest.load_manifest(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="nope.csv"):
            ingest.load_manifest(tmp_path / "nope.csv")

    def test_round_trip(self, tmp_path):
        m = DatasetManifest(
            "D",
            [
                rec("a", patient_id="p", icdr=2, dme=True, age_years=33.5, diabetic=True),
                rec("b", icdr=None, gradable=False),
            ],
        )
        ingest.write_manifest(m, tmp_path / "out.csv")
        assert (tmp_path / "out.csv").read_text().splitlines()[0] + "\n" == HEADER
        back = ingest.load_manifest(tmp_path / "out.csv")
        assert back.records == m.records

    def test_mixed_dataset_ids_rejected(self, tmp_path):
        p = write(tmp_path, HEADER + "a,D,a.png,p,1,,1,,\n" + "b,E,b.png,q,2,,1,,\n")
        with pytest.raises(ManifestValidationError):
            ingest.load_manifest(p)


class TestExclusions:
    def test_nongradable(self):
        assert ingest.exclusion_reason(rec("a", icdr=1, gradable=False)) == "nongradable"

    def test_age_boundary(self):
        assert ingest.exclusion_reason(rec("a", icdr=1, age_years=17)) == "age<18"
        assert ingest.exclusion_reason(rec("a", icdr=1, age_years=18)) is None

    def test_five_records_two_violating(self):
        m = DatasetManifest(
            "D",
            [
                rec("a", icdr=0),
                rec("b", icdr=1, age_years=12),
                rec("c", icdr=2, diabetic=True),
                rec("d", icdr=3, diabetic=False),
                rec("e", icdr=4, age_years=80),
            ],
        )
        kept = ingest.apply_exclusions(m)
        assert kept.ids() == ["a", "c", "e"]
        assert ingest.exclusion_summary(m) == {"nongradable": 0, "missing_icdr": 0, "age<18": 1, "nondiabetic": 1}

    def test_first_rule_counts(self):
        m = DatasetManifest("D", [rec("a", icdr=None, gradable=False, age_years=3)])
        assert ingest.exclusion_summary(m)["nongradable"] == 1
        assert sum(ingest.exclusion_summary(m).values()) == 1

    @given(st.lists(st.tuples(st.booleans(), st.sampled_from([None, 0, 2, 4]), st.sampled_from([None, 5.0, 17.9, 18.0, 60.0]), st.sampled_from([None, True, False])), max_size=12))
    def test_idempotent(self, rows):
        m = DatasetManifest(
            "D", [rec(f"s{i}", gradable=g, icdr=c, age_years=a, diabetic=d) for i, (g, c, a, d) in enumerate(rows)]
        )
        once = ingest.apply_exclusions(m)
        assert ingest.apply_exclusions(once).records == once.records


class TestDeriveRdr:
    def test_examples(self):
        assert ingest.derive_rdr(rec("a", icdr=2))
        assert ingest.derive_rdr(rec("a", icdr=1, dme=True))
        assert not ingest.derive_rdr(rec("a", icdr=0))

    def test_missing_grade(self):
        with pytest.raises(MissingLabelError):
            ingest.derive_rdr(rec("a"))

    @pytest.mark.parametrize("dme", [None, False, True])
    def test_monotone_in_grade(self, dme):
        vals = [ingest.derive_rdr(rec("a", icdr=k, dme=dme)) for k in range(5)]
        assert all(not a or b for a, b in zip(vals, vals[1:]))


class TestSplit:
    def test_ten_single_patients(self):
        m = manifest("D", 10)
        for seed in range(20):
            spec = ingest.split_patient_stratified(m, 0.1, seed)
            assert len(spec.val_ids) == 1
            assert len(spec.train_ids) == 9

    def test_patient_kept_together(self):
        m = DatasetManifest(
            "D", [rec(f"s{i}", patient_id="big" if i < 3 else f"p{i}", icdr=0) for i in range(12)]
        )
        for seed in range(30):
            spec = ingest.split_patient_stratified(m, 0.3, seed)
            big = {"s0", "s1", "s2"}
            assert big <= spec.train_ids or big <= spec.val_ids

    def test_deterministic(self):
        m = manifest("D", 40, per_patient=3)
        assert ingest.split_patient_stratified(m, 0.2, 7) == ingest.split_patient_stratified(m, 0.2, 7)

    def test_records_without_patient_are_singletons(self):
        m = DatasetManifest("D", [rec(f"s{i}", icdr=0) for i in range(10)])
        spec = ingest.split_patient_stratified(m, 0.2, 1)
        assert len(spec.val_ids) == 2

    def test_small_manifest_keeps_every_partition(self):
        # 5 patients x 2 images: both quotas round to zero patients
        m = manifest("D", 10, per_patient=2)
        for seed in range(10):
            spec = ingest.split_patient_stratified(m, 0.1, seed, test_fraction=0.1)
            assert len(spec.test_ids) == 2 and len(spec.val_ids) == 2 and len(spec.train_ids) == 6

    def test_two_patients_no_test_partition(self):
        spec = ingest.split_patient_stratified(manifest("D", 2), 0.1, 0, test_fraction=0.1)
        assert not spec.test_ids and len(spec.val_ids) == 1

    def test_rejects_bad_fraction(self):
        with pytest.raises(ValueError):
            ingest.split_patient_stratified(manifest("D", 5), 0.0, 0)


class TestAssemblePlan:
    names = ["APTOS", "EYEPACS", "IDRiD", "MESSIDOR2", "DDR", "RFMiD", "DeepDRiD"]

    def test_mst_excludes_target(self):
        ms = [manifest(n, 20, per_patient=2) for n in self.names]
        plan = ingest.assemble_plan(Mode.MULTI_SOURCE, ms, "IDRiD", seed=3)
        assert {r.dataset_id for r in plan.source_train + plan.joint_val} == set(self.names) - {"IDRiD"}
        assert {r.dataset_id for r in plan.target_eval} == {"IDRiD"}
        assert len(plan.target_eval) == 20
        used = {r.sample_id for r in plan.source_train + plan.joint_val}
        assert all(r.sample_id not in used for r in plan.target_eval)

    def test_single_source(self):
        plan = ingest.assemble_plan("SS", [manifest("APTOS", 50)], seed=0)
        assert plan.target_domain is None
        ids = [set(r.sample_id for r in part) for part in (plan.source_train, plan.joint_val, plan.target_eval)]
        assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
        assert sum(map(len, ids)) == 50
        assert ids[2]

    def test_single_source_external_test(self):
        test = manifest("MESSIDOR2", 5)
        plan = ingest.assemble_plan("SS", [manifest("APTOS", 30)], test_manifest=test)
        assert [r.sample_id for r in plan.target_eval] == test.ids()
        assert len(plan.source_train) + len(plan.joint_val) == 30

    def test_unknown_target(self):
        with pytest.raises(UnknownDomainError):
            ingest.assemble_plan("MST", [manifest("A", 4), manifest("B", 4)], "C")

    def test_mst_needs_target(self):
        with pytest.raises(PlanError):
            ingest.assemble_plan("MST", [manifest("A", 4), manifest("B", 4)])

    def test_ss_rejects_several_sources(self):
        with pytest.raises(PlanError):
            ingest.assemble_plan("SS", [manifest("A", 4), manifest("B", 4)])

    def test_order_independent(self):
        ms = [manifest(n, 15, per_patient=3) for n in self.names[:4]]
        a = ingest.assemble_plan("MST", ms, "APTOS", seed=9)
        b = ingest.assemble_plan("MST", ms[::-1], "APTOS", seed=9)
        assert {r.sample_id for r in a.joint_val} == {r.sample_id for r in b.joint_val}

    def test_plan_rejects_leak(self):
        r = rec("x", "T", icdr=1)
        with pytest.raises(PlanError):
            ingest.TrainingPlan(Mode.MULTI_SOURCE, [r], [], "T", [r])

    def test_mode_parse(self):
        assert Mode.parse("mst") is Mode.MULTI_SOURCE
        assert Mode.parse("single-source") is Mode.SINGLE_SOURCE
        with pytest.raises(PlanError):
            Mode.parse("semi")


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 30), st.integers(1, 4), st.floats(0.05, 0.5), st.integers(0, 2**31))
def test_split_covers_every_record_once(n, per_patient, frac, seed):
    m = manifest("D", n, per_patient=per_patient)
    spec = ingest.split_patient_stratified(m, frac, seed)
    assert spec.train_ids | spec.val_ids == set(m.ids())
    assert not spec.train_ids & spec.val_ids
