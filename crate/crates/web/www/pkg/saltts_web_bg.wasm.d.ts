/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const lr_curve: (a: number, b: number, c: number) => [number, number];
export const mcd_under_noise: (a: number, b: number, c: number, d: bigint) => [number, number, number];
export const repeater_schedule: (a: number, b: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
