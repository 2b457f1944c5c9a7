/* Loads a checkpoint, encodes one item and ranks it against itself.
 * Build: cc smoke.c -I../include ../../../target/debug/liblagnh_ffi.a -lpthread -ldl -lm */
#include <stdio.h>
#include <stdlib.h>

#include "lagnh.h"

static int fail(const char *what, LagnhStatus s) {
    fprintf(stderr, "%s failed (%d): %s\n", what, (int)s, lagnh_last_error());
    return 1;
}

int main(int argc, char **argv) {
    if (argc != 2) {
        fprintf(stderr, "usage: %s model.ckpt\n", argv[0]);
        return 2;
    }
    LagnhModel *model = NULL;
    LagnhStatus s = lagnh_model_load(argv[1], &model);
    if (s != LAGNH_STATUS_OK) return fail("load", s);

    size_t r, d, c;
    s = lagnh_model_dims(model, &r, &d, &c);
    if (s != LAGNH_STATUS_OK) return fail("dims", s);

    size_t words = lagnh_words_per_code(r);
    float *x = calloc(d, sizeof *x);
    uint8_t *y = calloc(c, 1);
    uint64_t *code = calloc(words, sizeof *code);
    for (size_t j = 0; j < d; j++) x[j] = (float)j;
    y[0] = 1;
    s = lagnh_model_encode(model, x, y, 1, code, words);
    if (s != LAGNH_STATUS_OK) return fail("encode", s);

    uint32_t h = 99;
    s = lagnh_hamming(code, code, words, &h);
    if (s != LAGNH_STATUS_OK) return fail("hamming", s);
    size_t order = 7;
    s = lagnh_rank(code, code, 1, r, &order);
    if (s != LAGNH_STATUS_OK) return fail("rank", s);

    s = lagnh_model_encode(model, x, y, 1, code, 0);
    printf("version %s r=%zu d=%zu c=%zu hamming=%u rank=%zu short-buffer=%d\n",
           lagnh_version(), r, d, c, h, order, (int)s);
    lagnh_model_free(model);
    free(x);
    free(y);
    free(code);
    return 0;
}
