"""Parser, serializer, and synthetic-generator tests."""

import random

import pytest

from canids.frames import (
    BACKGROUND_DICTIONARY,
    CanFrame,
    CaptureMeta,
    ClassLabel,
    DlcMismatch,
    EmptyProfile,
    FrameFlag,
    IdOutOfRange,
    MalformedLine,
    OddHexDigits,
    SynthProfile,
    parse_candump,
    parse_dataset_csv,
    read_capture,
    serialize_candump,
    serialize_dataset_csv,
    synth_capture,
    synth_mixed_capture,
    write_capture,
    load_frames,
)


class TestCanFrameInvariants:
    def test_id_range(self):
        with pytest.raises(ValueError):
            CanFrame(0.0, 1 << 29, 0, b"")
        CanFrame(0.0, (1 << 29) - 1, 0, b"")  # top of the range is fine

    def test_dlc_payload_agreement(self):
        with pytest.raises(ValueError):
            CanFrame(0.0, 1, 2, b"\x01")
        with pytest.raises(ValueError):
            CanFrame(0.0, 1, 9, bytes(9))

    def test_flag_class_consistency(self):
        with pytest.raises(ValueError):
            CanFrame(0.0, 1, 0, b"", FrameFlag.NORMAL, ClassLabel.DOS)
        with pytest.raises(ValueError):
            CanFrame(0.0, 1, 0, b"", FrameFlag.INJECTED, ClassLabel.NORMAL)


class TestDatasetCsv:
    def test_regular_line(self):
        frame = parse_dataset_csv("1478198376.389427,0316,8,05,21,68,09,21,21,00,6f,R")
        assert frame.can_id == 0x316
        assert frame.dlc == 8
        assert frame.payload == bytes([0x05, 0x21, 0x68, 0x09, 0x21, 0x21, 0x00, 0x6F])
        assert frame.flag is FrameFlag.NORMAL
        assert frame.attack_class is ClassLabel.NORMAL

    def test_injected_line_takes_capture_class(self):
        frame = parse_dataset_csv(
            "1.0,0000,8,00,00,00,00,00,00,00,00,T", capture_class=ClassLabel.DOS
        )
        assert frame.can_id == 0
        assert frame.flag is FrameFlag.INJECTED
        assert frame.attack_class is ClassLabel.DOS

    def test_wrong_field_count_is_malformed(self):
        with pytest.raises(MalformedLine):
            parse_dataset_csv("1.0,0316,8,05,21,R")

    def test_dlc_out_of_range(self):
        with pytest.raises(DlcMismatch):
            parse_dataset_csv("1.0,0316,9,00,00,00,00,00,00,00,00,00,R")

    def test_id_out_of_range(self):
        with pytest.raises(IdOutOfRange):
            parse_dataset_csv("1.0,20000000,0,R")

    def test_bad_flag_and_bad_hex(self):
        with pytest.raises(MalformedLine):
            parse_dataset_csv("1.0,0316,0,X")
        with pytest.raises(MalformedLine):
            parse_dataset_csv("1.0,03g6,0,R")
        with pytest.raises(MalformedLine):
            parse_dataset_csv("1.0,0316,1,zz,R")

    def test_injected_in_normal_capture_rejected(self):
        with pytest.raises(MalformedLine):
            parse_dataset_csv("1.0,0316,0,T", capture_class=ClassLabel.NORMAL)

    def test_roundtrip_canonicalizes(self):
        line = "12.500000,0316,2,ab,cd,R"
        frame = parse_dataset_csv(line)
        assert serialize_dataset_csv(frame) == line
        # non-canonical input (3-digit id, uppercase hex) canonicalizes
        frame2 = parse_dataset_csv("12.5,316,2,AB,CD,R")
        assert serialize_dataset_csv(frame2) == line


class TestCandump:
    def test_basic_line(self):
        frame = parse_candump("(1698765432.123456) can0 123#DEADBEEF")
        assert frame.can_id == 0x123
        assert frame.dlc == 4
        assert frame.payload == bytes([0xDE, 0xAD, 0xBE, 0xEF])
        assert frame.flag is FrameFlag.NORMAL

    def test_empty_payload(self):
        frame = parse_candump("(0.0) can0 000#")
        assert frame.can_id == 0
        assert frame.dlc == 0
        assert frame.payload == b""

    def test_odd_hex_digits(self):
        with pytest.raises(OddHexDigits):
            parse_candump("(0.0) can0 123#ABC")

    def test_malformed_variants(self):
        with pytest.raises(MalformedLine):
            parse_candump("can0 123#AB")
        with pytest.raises(MalformedLine):
            parse_candump("(0.0) can0 123")
        with pytest.raises(MalformedLine):
            parse_candump("(0.0) can0 123#" + "AA" * 9)
        with pytest.raises(IdOutOfRange):
            parse_candump("(0.0) can0 FFFFFFFF#AA")

    def test_roundtrip(self):
        line = "(1698765432.123456) can0 123#DEADBEEF"
        assert serialize_candump(parse_candump(line)) == line


def _random_frame(rng: random.Random) -> CanFrame:
    dlc = rng.randint(0, 8)
    return CanFrame(
        timestamp=rng.uniform(0, 2e9),
        can_id=rng.randrange(1 << 29) if rng.random() < 0.3 else rng.randrange(1 << 11),
        dlc=dlc,
        payload=bytes(rng.randrange(256) for _ in range(dlc)),
    )


def test_random_roundtrips_both_formats():
    rng = random.Random(99)
    for _ in range(500):
        frame = _random_frame(rng)
        line = serialize_dataset_csv(frame)
        assert serialize_dataset_csv(parse_dataset_csv(line)) == line
        dump = serialize_candump(frame)
        assert serialize_candump(parse_candump(dump)) == dump


class TestSynth:
    def test_dos_counts_and_ids(self):
        profile = SynthProfile(
            attack=ClassLabel.DOS, duration_s=1.0, background_rate=100, injection_rate=50
        )
        frames = synth_capture(profile, seed=1)
        assert len(frames) == 150
        injected = [f for f in frames if f.injected]
        assert len(injected) == 50
        assert all(f.can_id == 0x000 for f in injected)
        assert all(f.payload == bytes(8) for f in injected)

    def test_fuzzing_ids_and_payloads_look_uniform(self):
        profile = SynthProfile(
            attack=ClassLabel.FUZZING, duration_s=20.0, background_rate=100, injection_rate=100
        )
        frames = [f for f in synth_capture(profile, seed=2) if f.injected]
        assert len(frames) == 2000
        assert all(0 <= f.can_id < (1 << 11) for f in frames)
        # crude uniformity: both halves of the 11-bit range are well used
        low = sum(1 for f in frames if f.can_id < (1 << 10))
        assert 0.4 < low / len(frames) < 0.6
        first_bytes = [f.payload[0] for f in frames]
        assert len(set(first_bytes)) > 200

    def test_spoof_targets_designated_ids(self):
        for attack, want_id in [(ClassLabel.RPM_SPOOF, 0x316), (ClassLabel.GEAR_SPOOF, 0x43F)]:
            profile = SynthProfile(attack=attack, duration_s=1.0)
            injected = [f for f in synth_capture(profile, seed=3) if f.injected]
            assert injected and all(f.can_id == want_id for f in injected)

    def test_determinism(self):
        profile = SynthProfile(attack=ClassLabel.FUZZING, duration_s=2.0)
        a = synth_capture(profile, seed=42)
        b = synth_capture(profile, seed=42)
        assert [serialize_dataset_csv(f) for f in a] == [serialize_dataset_csv(f) for f in b]
        c = synth_capture(profile, seed=43)
        assert [serialize_dataset_csv(f) for f in a] != [serialize_dataset_csv(f) for f in c]

    def test_invariants_across_random_profiles(self):
        rng = random.Random(5)
        for _ in range(20):
            attack = ClassLabel(rng.randrange(5))
            profile = SynthProfile(
                attack=attack,
                duration_s=rng.uniform(0.5, 3.0),
                background_rate=rng.uniform(20, 200),
                injection_rate=rng.uniform(10, 100),
            )
            frames = synth_capture(profile, seed=rng.randrange(1 << 30))
            assert frames
            times = [f.timestamp for f in frames]
            assert times == sorted(times)
            for f in frames:
                assert (f.flag is FrameFlag.INJECTED) == (f.attack_class is not ClassLabel.NORMAL)
                if not f.injected:
                    assert f.can_id in BACKGROUND_DICTIONARY
                elif attack is ClassLabel.DOS:
                    assert f.can_id == 0x000
            if attack is ClassLabel.NORMAL:
                assert all(not f.injected for f in frames)
            else:
                assert any(f.injected for f in frames)

    def test_empty_profile(self):
        with pytest.raises(EmptyProfile):
            synth_capture(SynthProfile(duration_s=0.0), seed=0)
        with pytest.raises(EmptyProfile):
            synth_capture(SynthProfile(background_rate=0.0), seed=0)

    def test_attack_intervals_respected(self):
        profile = SynthProfile(
            attack=ClassLabel.DOS,
            duration_s=4.0,
            attack_intervals=((1.0, 2.0),),
            injection_rate=40,
        )
        injected = [f for f in synth_capture(profile, seed=7) if f.injected]
        assert len(injected) == 40
        assert all(1.0 <= f.timestamp < 2.0 for f in injected)


class TestCaptureContainer:
    def test_roundtrip(self, tmp_path):
        frames = synth_capture(SynthProfile(attack=ClassLabel.RPM_SPOOF, duration_s=1.0), seed=11)
        meta = CaptureMeta.synthetic(11, frames)
        path = tmp_path / "capture.log"
        write_capture(path, frames, meta)
        meta2, frames2 = read_capture(path)
        assert meta2.frame_count == len(frames)
        assert meta2.class_histogram == meta.class_histogram
        assert [serialize_dataset_csv(f) for f in frames2] == [
            serialize_dataset_csv(f) for f in frames
        ]
        assert [f.attack_class for f in frames2] == [f.attack_class for f in frames]

    def test_mixed_capture_histogram(self, tmp_path):
        profiles = [
            SynthProfile(attack=ClassLabel.DOS, duration_s=0.5),
            SynthProfile(attack=ClassLabel.FUZZING, duration_s=0.5),
        ]
        frames = synth_mixed_capture(profiles, seed=13)
        meta = CaptureMeta.synthetic(13, frames)
        assert meta.class_histogram[ClassLabel.DOS] > 0
        assert meta.class_histogram[ClassLabel.FUZZING] > 0
        path = tmp_path / "mixed.log"
        write_capture(path, frames, meta)
        _, frames2 = read_capture(path)
        assert len(frames2) == len(frames)

    def test_load_frames_sniffs_formats(self, tmp_path):
        frames = synth_capture(SynthProfile(attack=ClassLabel.DOS, duration_s=0.5), seed=17)
        container = tmp_path / "c.log"
        write_capture(container, frames, CaptureMeta.synthetic(17, frames))
        assert len(load_frames(container)) == len(frames)

        csv_path = tmp_path / "plain.csv"
        csv_path.write_text("".join(serialize_dataset_csv(f) + "\n" for f in frames if not f.injected))
        assert all(not f.injected for f in load_frames(csv_path))

        dump_path = tmp_path / "dump.log"
        dump_path.write_text(
            "".join(serialize_candump(f) + "\n" for f in frames if not f.injected)
        )
        loaded = load_frames(dump_path)
        assert all(f.flag is FrameFlag.NORMAL for f in loaded)
