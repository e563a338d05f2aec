mod common;

use common::{random_input, random_program};
use etmfuzz::coverage::ExceptionFilterMode;
use etmfuzz::oracle::{discrimination_check, reconstruct_flow, Discrimination};
use etmfuzz::sim::{assemble, Device, ProgramImage, Slot};
use etmfuzz::trace::decode_packets;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const BUDGET: u64 = 2_000;

fn program(seed: u64, irq: bool) -> ProgramImage {
    assemble(&random_program(&mut ChaCha8Rng::seed_from_u64(seed), irq)).unwrap()
}

fn input() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..4, 0..6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    /// Reconstruction yields every block boundary the run crossed, in order,
    /// ending with the block the run stopped in.
    #[test]
    fn reconstruction_follows_execution(seed in any::<u64>(), input in input()) {
        let image = program(seed, false);
        let mut d = Device::new(image.clone());
        d.load_testcase(&input, Slot::Current).unwrap();
        let (report, mut log) = d.run_logged(BUDGET);
        log.push(d.pc());
        let leaders = image.leaders();
        let expected: Vec<u32> = log
            .into_iter()
            .filter(|&pc| image.index_of(pc).is_some_and(|i| leaders[i]))
            .collect();
        let packets = decode_packets(report.trace.as_bytes()).unwrap();
        let flow = reconstruct_flow(&image, &packets, ExceptionFilterMode::Keep).unwrap();
        prop_assert_eq!(flow.blocks, expected);
    }

    /// Two runs look different to packet-level extraction exactly when they
    /// look different to full reconstruction.
    #[test]
    fn extraction_discriminates_like_reconstruction(
        seed in any::<u64>(),
        irq in prop::option::of(3u64..10),
        pair in any::<u64>(),
    ) {
        let image = program(seed, irq.is_some());
        let mut rng = ChaCha8Rng::seed_from_u64(pair);
        let mut traces = Vec::new();
        for _ in 0..2 {
            let mut d = Device::new(image.clone());
            if let Some(period) = irq {
                d.set_interrupt_schedule(period, 15).unwrap();
            }
            d.load_testcase(&random_input(&mut rng), Slot::Current).unwrap();
            traces.push(d.run(BUDGET).trace);
        }
        let verdict = discrimination_check(
            &image,
            traces[0].as_bytes(),
            traces[1].as_bytes(),
            ExceptionFilterMode::Discard,
        ).unwrap();
        prop_assert_eq!(verdict, Discrimination::Agree);
    }
}
