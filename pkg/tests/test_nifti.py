import gzip
import struct

import nibabel as nib
import numpy as np
import pytest

from silverstrip.errors import InvariantError, NiftiError
from silverstrip.nifti import encode_volume, load_mask, load_volume, read_header, save_volume
from silverstrip.volume import BinaryMask, VoxelVolume


def _nib_write(path, data, spacing=(1.0, 1.0, 1.0), dtype=None, slope=None, inter=None, endian="<"):
    hdr = nib.Nifti1Header(endianness=endian)
    img = nib.Nifti1Image(np.asarray(data), np.diag([*spacing, 1.0]), header=hdr)
    if dtype is not None:
        img.set_data_dtype(dtype)
    if slope is not None:
        img.header.set_slope_inter(slope, inter)
    nib.save(img, str(path))


def test_minimal_float32_is_bit_exact(tmp_path):
    data = np.arange(8, dtype=np.float32).reshape(2, 2, 2) * np.float32(0.1)
    path = tmp_path / "a.nii"
    _nib_write(path, data)
    vol = load_volume(path)
    assert vol.dims == (2, 2, 2)
    assert vol.spacing == (1.0, 1.0, 1.0)
    assert vol.data.tobytes() == data.tobytes()


def test_four_dimensional_rejected(tmp_path):
    path = tmp_path / "4d.nii"
    _nib_write(path, np.zeros((2, 2, 2, 2), dtype=np.float32))
    with pytest.raises(NiftiError, match="unsupported dimensionality"):
        load_volume(path)


def test_int16_scaling_applied(tmp_path):
    path = tmp_path / "s.nii"
    raw = np.full((2, 2, 2), 5, dtype=np.int16)
    hdr = nib.Nifti1Header()
    hdr.set_data_dtype(np.int16)
    img = nib.Nifti1Image(raw, np.eye(4), header=hdr)
    img.header.set_slope_inter(2.0, 10.0)
    img.header["vox_offset"] = 352
    # write raw values untouched by nibabel's own rescaling
    with open(path, "wb") as fh:
        img.header.write_to(fh)  # 348-byte header plus 4-byte extension flag
        fh.write(raw.tobytes(order="F"))
    assert read_header(path)["scl_slope"] == 2.0
    vol = load_volume(path)
    # 5 * 2.0 + 10.0
    assert np.all(vol.data == 20.0)


def test_big_endian_header_accepted(tmp_path):
    data = np.arange(24, dtype=np.int16).reshape(2, 3, 4)
    path = tmp_path / "be.nii"
    _nib_write(path, data, spacing=(1.5, 2.0, 0.5), endian=">")
    assert struct.unpack(">i", path.read_bytes()[:4])[0] == 348
    vol = load_volume(path)
    assert vol.spacing == (1.5, 2.0, 0.5)
    np.testing.assert_array_equal(vol.data, data.astype(np.float32))


def test_unsupported_datatype(tmp_path):
    path = tmp_path / "f64.nii"
    _nib_write(path, np.zeros((2, 2, 2)), dtype=np.float64)
    with pytest.raises(NiftiError, match="datatype"):
        load_volume(path)


def test_truncated_payload(tmp_path):
    blob = encode_volume(VoxelVolume(np.ones((3, 3, 3))))
    path = tmp_path / "t.nii"
    path.write_bytes(blob[:-5])
    with pytest.raises(NiftiError, match="truncated payload"):
        load_volume(path)


def test_nonpositive_pixdim_names_field(tmp_path):
    blob = bytearray(encode_volume(VoxelVolume(np.ones((2, 2, 2)))))
    # pixdim[2] lives at byte 76 + 2 * 4
    blob[84:88] = struct.pack("<f", 0.0)
    path = tmp_path / "p.nii"
    path.write_bytes(bytes(blob))
    with pytest.raises(NiftiError, match=r"pixdim\[2\]"):
        load_volume(path)


def test_bad_magic(tmp_path):
    blob = bytearray(encode_volume(VoxelVolume(np.ones((2, 2, 2)))))
    blob[344:348] = b"xx1\x00"
    path = tmp_path / "m.nii"
    path.write_bytes(bytes(blob))
    with pytest.raises(NiftiError, match="magic"):
        load_volume(path)


def test_ni1_pair_read(tmp_path):
    data = np.arange(8, dtype=np.uint8).reshape(2, 2, 2)
    img = nib.Nifti1Pair(data, np.eye(4))
    nib.save(img, str(tmp_path / "pair.hdr"))
    vol = load_volume(tmp_path / "pair.hdr")
    np.testing.assert_array_equal(vol.data, data)


def test_saved_files_readable_by_nibabel(tmp_path, rng):
    data = rng.normal(size=(4, 5, 6)).astype(np.float32)
    vol = VoxelVolume(data, (0.5, 1.25, 3.0))
    save_volume(vol, tmp_path / "v.nii")
    img = nib.load(str(tmp_path / "v.nii"))
    assert img.get_data_dtype() == np.float32
    np.testing.assert_array_equal(np.asarray(img.dataobj), data)
    assert tuple(float(z) for z in img.header.get_zooms()) == (0.5, 1.25, 3.0)


def test_gzip_mask_through_independent_reader(tmp_path, rng):
    mask = BinaryMask(rng.random((3, 3, 3)) < 0.5)
    path = tmp_path / "m.nii.gz"
    save_volume(mask, path)
    with gzip.open(path) as fh:
        assert fh.read(4) == struct.pack("<i", 348)
    img = nib.load(str(path))
    assert img.get_data_dtype() == np.uint8
    np.testing.assert_array_equal(np.asarray(img.dataobj).astype(bool), mask.data)
    assert load_mask(path) == mask


def test_gzip_output_is_byte_stable(tmp_path):
    mask = BinaryMask(np.eye(4, dtype=bool)[:, :, None].repeat(2, axis=2))
    save_volume(mask, tmp_path / "a.nii.gz")
    save_volume(mask, tmp_path / "b.nii.gz")
    assert (tmp_path / "a.nii.gz").read_bytes() == (tmp_path / "b.nii.gz").read_bytes()


def test_mask_with_value_two_never_written(tmp_path):
    with pytest.raises(InvariantError):
        save_volume(BinaryMask(np.full((2, 2, 2), 2)), tmp_path / "x.nii")
    assert not (tmp_path / "x.nii").exists()


def test_load_mask_rejects_non_binary_file(tmp_path):
    save_volume(VoxelVolume(np.full((2, 2, 2), 0.5)), tmp_path / "f.nii")
    with pytest.raises(InvariantError):
        load_mask(tmp_path / "f.nii")


def test_lossy_dtype_refused(tmp_path):
    with pytest.raises(InvariantError, match="representable"):
        save_volume(VoxelVolume(np.full((2, 2, 2), 0.5)), tmp_path / "i.nii", dtype="int16")


def test_missing_file_is_nifti_error(tmp_path):
    with pytest.raises(NiftiError, match="cannot read"):
        load_volume(tmp_path / "nope.nii")
