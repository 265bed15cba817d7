"""Smoke test for the vnet Python module. Run after building it with
`pip install -e crates/py --no-build-isolation`."""

import math
import os
import tempfile

import vnet


def main():
    rows = vnet.receptive_fields()
    fields = [rf for _, _, rf in rows]
    assert fields == [5, 22, 72, 172, 372, 476, 528, 546, 551, 551], fields

    assert math.isclose(vnet.lr_schedule(0), 1e-4)
    assert math.isclose(vnet.lr_schedule(25_000), 1e-5)

    image, label = vnet.synthetic_sphere((16, 16, 16), 4.0, seed=3)
    assert image.dims == (16, 16, 16)
    assert 0 < label.foreground_count() < len(label)
    assert vnet.dice(label, label) == 1.0
    assert vnet.hausdorff(label, label) == 0.0

    shifted = vnet.LabelVolume(label.dims, [0] + list(label.data)[:-1])
    assert 0.0 < vnet.dice(label, shifted) < 1.0
    assert vnet.hausdorff(label, shifted) > 0.0

    try:
        vnet.Volume((2, 2, 2), [0.0] * 7)
    except ValueError:
        pass
    else:
        raise AssertionError("bad volume length accepted")

    small = [("input", "16,16,16"), ("base_channels", "2"), ("kernel", "3"),
             ("convs_down", "1,1"), ("convs_up", "1")]
    model = vnet.Model(seed=1, overrides=small)
    assert model.input_dims == (16, 16, 16)

    with tempfile.TemporaryDirectory() as tmp:
        data = os.path.join(tmp, "data")
        os.makedirs(data)
        for i in range(2):
            img, lab = vnet.synthetic_sphere((16, 16, 16), 4.0, seed=10 + i)
            img.save(os.path.join(data, f"case{i:03}_image.vvol"))
            lab.save(os.path.join(data, f"case{i:03}_label.vvol"))

        history = model.fit(data, 5, overrides=[("deform", "false"), ("hist_match", "false")])
        assert [row[0] for row in history] == list(range(5))
        assert all(math.isfinite(row[2]) for row in history)

        path = os.path.join(tmp, "model.vpar")
        model.save(path)
        again = vnet.Model.load(path)
        prob, mask = model.segment(image)
        prob2, mask2 = again.segment(image)
        assert prob.data == prob2.data and mask.data == mask2.data
        assert all(0.0 <= p <= 1.0 for p in prob.data)

        roundtrip = os.path.join(tmp, "image.vvol")
        image.save(roundtrip)
        assert vnet.Volume.load(roundtrip).data == image.data

    print("smoke ok:", model.parameter_count, "parameters")


if __name__ == "__main__":
    main()
