mod common;

use common::random_program;
use etmfuzz::sim::{assemble, Device, Filter, ProgramImage, RunReport, Slot, TraceConfig};
use etmfuzz::trace::{decode_packets, MarkerKind, TracePacket};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const BUDGET: u64 = 3_000;

fn program(seed: u64, irq: bool) -> ProgramImage {
    let src = random_program(&mut ChaCha8Rng::seed_from_u64(seed), irq);
    assemble(&src).unwrap()
}

fn run(image: &ProgramImage, input: &[u8], config: TraceConfig) -> (RunReport, Vec<u32>) {
    let mut d = Device::new(image.clone());
    d.set_trace_config(config).unwrap();
    d.load_testcase(input, Slot::Current).unwrap();
    d.run_logged(BUDGET)
}

fn input() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..4, 0..6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn generated_programs_fit(seed in any::<u64>(), irq in any::<bool>()) {
        prop_assert!(program(seed, irq).len() <= 64);
    }

    #[test]
    fn runs_are_deterministic(seed in any::<u64>(), input in input(), period in 2u64..20) {
        let image = program(seed, true);
        let mut d = Device::new(image);
        d.set_interrupt_schedule(period, 15).unwrap();
        d.load_testcase(&input, Slot::Current).unwrap();
        let first = d.run(BUDGET);
        for _ in 0..3 {
            d.reset();
            prop_assert_eq!(&d.run(BUDGET), &first);
        }
    }

    #[test]
    fn one_atom_per_retired_instruction(seed in any::<u64>(), input in input()) {
        let image = program(seed, false);
        let (report, log) = run(&image, &input, TraceConfig::default());
        let atoms: usize = decode_packets(&report.trace.0)
            .unwrap()
            .iter()
            .map(|p| match p {
                TracePacket::AtomGroup(g) => g.len(),
                _ => 0,
            })
            .sum();
        prop_assert_eq!(atoms as u64, report.executed);
        prop_assert_eq!(log.len() as u64, report.executed);
    }

    /// Every branch packet names the address execution actually moved to.
    #[test]
    fn branch_packets_are_sound(seed in any::<u64>(), input in input()) {
        let image = program(seed, false);
        let (report, log) = run(&image, &input, TraceConfig::default());
        let packets = decode_packets(&report.trace.0).unwrap();
        let mut retired = 0usize;
        for p in &packets {
            match p {
                TracePacket::AtomGroup(g) => retired += g.len(),
                TracePacket::Branch { target, exception: None } => {
                    let next = log.get(retired).copied();
                    // The target may be where the run stopped.
                    prop_assert!(next == Some(*target) || (next.is_none() && image.contains(*target)),
                        "branch to 0x{target:08X} after {retired} instructions");
                }
                other => prop_assert!(false, "unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn address_filter_contains_trace(seed in any::<u64>(), input in input(), a in 0usize..64, b in 0usize..64) {
        let image = program(seed, false);
        let (lo, hi) = (a.min(b), a.max(b) + 1);
        let (start, end) = (image.address_of(lo), image.address_of(hi));
        let filter = TraceConfig::with_filters(vec![Filter::AddressRange { start, end }]);
        let (report, log) = run(&image, &input, filter);
        let packets = decode_packets(&report.trace.0).unwrap();
        let mut inside = 0usize;
        let mut active = false;
        for p in &packets {
            match p {
                TracePacket::TraceMarker(MarkerKind::Start) => active = true,
                TracePacket::TraceMarker(MarkerKind::Stop) => active = false,
                TracePacket::Branch { target, .. } => {
                    prop_assert!(active);
                    prop_assert!((start..end).contains(target), "0x{target:08X} outside");
                }
                TracePacket::AtomGroup(g) => {
                    prop_assert!(active);
                    inside += g.len();
                }
                TracePacket::ExceptionReturn => {}
            }
        }
        let expected = log.iter().filter(|pc| (start..end).contains(*pc)).count();
        prop_assert_eq!(inside, expected);
    }
}
