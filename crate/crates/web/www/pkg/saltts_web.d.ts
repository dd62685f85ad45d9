/* tslint:disable */
/* eslint-disable */

/**
 * Learning rate at steps `1..=steps`.
 */
export function lr_curve(base: number, warmup: number, steps: number): Float64Array;

export function mcd_under_noise(n_mels: number, frames: number, sigma: number, seed: bigint): number;

/**
 * Schedule for `n_src` SSL frames as JSON:
 * `{"dst_len": n, "src": [...], "noise": [...]}`.
 */
export function repeater_schedule(n_src: number, noise_both_repeats: boolean): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly lr_curve: (a: number, b: number, c: number) => [number, number];
    readonly mcd_under_noise: (a: number, b: number, c: number, d: bigint) => [number, number, number];
    readonly repeater_schedule: (a: number, b: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
