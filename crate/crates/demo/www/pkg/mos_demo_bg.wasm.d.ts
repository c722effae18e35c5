/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const merge_trajectory: (a: number, b: number, c: number, d: number, e: number) => [number, number];
export const replay_samples: (a: number, b: number, c: number, d: number, e: number, f: number, g: bigint) => [number, number];
export const run_stream: (a: number, b: number, c: number, d: number, e: bigint) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
