"""Smoke test for the oaiagg extension module.

Build and install first:  pip install --no-build-isolation -e crates/py
Then run:                 python python/smoke_test.py
"""

import hashlib
import pathlib
import sys

import oaiagg

ROOT = pathlib.Path(__file__).resolve().parent.parent


def check_helpers():
    assert oaiagg.normalize_url("HTTP://Example.COM:80/a/./b/../c#x") == "http://example.com/a/c"
    try:
        oaiagg.normalize_url("no scheme here")
    except ValueError:
        pass
    else:
        raise AssertionError("unparseable URL accepted")

    assert oaiagg.scrub_uri("  HTTP://example.org/x y") is not None
    assert oaiagg.scrub_uri("urn:isbn:0451450523") is None

    assert oaiagg.parse_datestamp("2006-03-01T12:00:00Z") == "2006-03-01T12:00:00Z"
    for bad in ("2006-03-01", "01-08-2005", "2006-03-01T12:00:00+01:00"):
        try:
            oaiagg.parse_datestamp(bad)
        except ValueError:
            continue
        raise AssertionError(f"accepted {bad!r}")

    data = b"identical bytes"
    assert oaiagg.md5_hex(data) == hashlib.md5(data).hexdigest()

    elements = [
        {"name": "title", "value": "  Tides   and Moons "},
        {"name": "description", "value": "No abstract submitted"},
        {"name": "identifier", "value": "http://example.org/tides"},
    ]
    once, rules = oaiagg.safe_transform(elements)
    twice, _ = oaiagg.safe_transform(once)
    assert once == twice, (once, twice)
    assert all(e["value"] != "No abstract submitted" for e in once)
    assert rules, "no transform rule fired"


def check_pipeline():
    scenario = (ROOT / "scenarios" / "clean.toml").read_text()
    p = oaiagg.Pipeline(scenario)
    report = p.register()
    assert report["verdict"] == "pass", report
    assert p.collection_id

    first = p.harvest()
    assert first["outcome"]["status"] == "success", first
    while p.advance():
        assert p.harvest()["outcome"]["status"] == "success"
    manifest = p.publish()
    assert p.repository_items() == p.ground_truth()
    assert manifest["record_count"] == 44

    hits = p.search("photosynthesis desert")
    assert [h["title"] for h in hits] == ["Photosynthesis in Desert Plants"]

    xml = p.oai_request([("verb", "ListRecords"), ("metadataPrefix", "oai_dc")])
    page = oaiagg.parse_list_response(xml)
    # records changed by the last event are still postdated past the simulated now
    assert "errors" not in page, page
    served = page["records"]
    assert 40 <= len(served) < manifest["record_count"], len(served)
    assert len({r["header"]["identifier"] for r in served}) == len(served)
    assert page["token"] is None


def main():
    check_helpers()
    check_pipeline()
    print("oaiagg smoke test: ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
