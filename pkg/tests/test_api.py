import pytest
import tempfile
import json
import os
import yaml
from fastapi.testclient import TestClient
from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker

os.environ.setdefault("AIS_STORAGE_PATH", tempfile.mkdtemp(prefix="ais-storage-"))

from app.api.endpoints import experiment_service, storage_service
from app.models.database import Base, get_db
from app.schemas.schemas import METRICS_COLUMNS
from main import app
from tests.conftest import TINY

# Test database setup
SQLALCHEMY_DATABASE_URL = "sqlite:///./test.db"
engine = create_engine(SQLALCHEMY_DATABASE_URL, connect_args={"check_same_thread": False})
TestingSessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)

def override_get_db():
    try:
        db = TestingSessionLocal()
        yield db
    finally:
        db.close()

app.dependency_overrides[get_db] = override_get_db

@pytest.fixture(scope="module")
def client():
    Base.metadata.create_all(bind=engine)
    with TestClient(app) as c:
        yield c
    Base.metadata.drop_all(bind=engine)

@pytest.fixture
def tiny_json():
    return dict(TINY)

def upload(client, name, filename, content, media_type="application/json", replace_existing=False):
    with tempfile.NamedTemporaryFile(mode='w', suffix=os.path.splitext(filename)[1], delete=False) as f:
        f.write(content)
        f.flush()

        with open(f.name, 'rb') as upload_file:
            response = client.post(
                "/api/v1/experiments/upload",
                files={"file": (filename, upload_file, media_type)},
                data={"name": name, "replace_existing": replace_existing}
            )

    os.unlink(f.name)
    return response

class TestHealth:

    def test_health(self, client):
        response = client.get("/health")

        assert response.status_code == 200
        assert response.json() == {"status": "healthy", "service": "wsn-ais-api"}

    def test_root_lists_grids(self, client):
        result = client.get("/").json()

        assert result["presets"] == ["desk", "paper"]
        assert result["grids"]["ais.r"] == [7, 10, 13, 16, 19, 22]

class TestExperimentUpload:

    def test_upload_json_experiment(self, client, tiny_json):
        """Test uploading a JSON experiment config"""
        response = upload(client, "tiny", "tiny.json", json.dumps(tiny_json))

        assert response.status_code == 200
        result = response.json()
        assert result["success"] is True
        assert result["version"] == 1
        assert "tiny" in result["message"]
        assert result["config_info"]["file_format"] == "json"

    def test_upload_yaml_experiment(self, client, tiny_json):
        """Test uploading a YAML experiment config"""
        response = upload(client, "tiny-yaml", "tiny.yaml", yaml.safe_dump(tiny_json), "application/x-yaml")

        assert response.status_code == 200
        result = response.json()
        assert result["success"] is True
        assert result["config_info"]["file_format"] == "yaml"
        assert result["config_info"]["file_name"] == "tiny.yaml"

    def test_upload_invalid_experiment(self, client, tiny_json):
        """An off-grid r without allow_off_grid is rejected before anything is stored"""
        tiny_json["allow_off_grid"] = False
        tiny_json["ais"] = {"r": 9}
        response = upload(client, "tiny-invalid", "invalid.json", json.dumps(tiny_json))

        assert response.status_code == 200
        result = response.json()
        assert result["success"] is False
        assert "validation failed" in result["message"].lower()
        assert client.get("/api/v1/experiments/latest?name=tiny-invalid").status_code == 404

    def test_unsupported_extension(self, client):
        response = upload(client, "tiny-txt", "tiny.txt", "n: 3", "text/plain")

        assert response.status_code == 200
        assert response.json()["success"] is False

    def test_version_increment(self, client, tiny_json):
        """Test that config versions increment correctly"""
        response1 = upload(client, "version-test", "sweep_v1.json", json.dumps(tiny_json))
        tiny_json["master_seed"] = 8
        response2 = upload(client, "version-test", "sweep_v2.json", json.dumps(tiny_json))

        assert response1.status_code == 200
        assert response2.status_code == 200
        assert response1.json()["version"] == 1
        assert response2.json()["version"] == 2

    def test_failed_registration_leaves_no_file(self, client, tiny_json, monkeypatch):
        """A stored file whose version row cannot be written is removed again"""
        def registry_down(db, experiment_id):
            raise RuntimeError("registry unavailable")

        monkeypatch.setattr(experiment_service, "mark_previous_versions_as_old", registry_down)
        response = upload(client, "orphan", "orphan.json", json.dumps(tiny_json))

        assert response.json()["success"] is False
        assert "registry unavailable" in response.json()["message"]
        assert not list((storage_service.base_path / "orphan").glob("*"))
        assert client.get("/api/v1/experiments/latest?name=orphan").status_code == 404

class TestExperimentRetrieval:

    def test_get_latest_config(self, client):
        response = client.get("/api/v1/experiments/latest?name=version-test")

        assert response.status_code == 200
        result = response.json()
        assert result["experiment"]["name"] == "version-test"
        assert result["config_info"]["is_latest"] is True
        assert result["config_info"]["version"] == 2

    def test_get_config_versions(self, client):
        response = client.get("/api/v1/experiments/versions?name=version-test")

        assert response.status_code == 200
        versions = response.json()
        assert [v["version"] for v in versions] == [2, 1]  # Latest first
        assert [v["is_latest"] for v in versions] == [True, False]

    def test_get_nonexistent_experiment(self, client):
        assert client.get("/api/v1/experiments/latest?name=nonexistent").status_code == 404
        assert client.get("/api/v1/experiments/versions?name=nonexistent").status_code == 404

    def test_list_experiments(self, client):
        response = client.get("/api/v1/experiments")

        assert response.status_code == 200
        names = [e["name"] for e in response.json()]
        assert "tiny" in names
        assert "version-test" in names
        assert "tiny-invalid" not in names

class TestExperimentRuns:

    def test_run_unknown_config(self, client):
        assert client.post("/api/v1/experiments/9999/run").status_code == 404
        assert client.get("/api/v1/experiments/9999/results").status_code == 404

    def test_run_and_fetch_results(self, client):
        config_id = client.get("/api/v1/experiments/latest?name=tiny").json()["config_info"]["id"]

        response = client.post(f"/api/v1/experiments/{config_id}/run")

        assert response.status_code == 200
        result = response.json()
        assert len(result["results"]) == 1
        cell = result["results"][0]
        assert cell["cell"] == "r10_d50_l0.5_CBR"
        assert list(cell["metrics"]) == METRICS_COLUMNS

        stored = client.get(f"/api/v1/experiments/{config_id}/results").json()
        assert [r["id"] for r in stored] == [r["id"] for r in result["results"]]
